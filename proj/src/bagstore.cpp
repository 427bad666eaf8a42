#include "halomil/bagstore.hpp"

#include <cmath>

namespace halomil {

const char* to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "validation" || name == "val") return Split::Validation;
  if (name == "test") return Split::Test;
  throw PreconditionError("unknown split '" + name + "'");
}

const char* to_string(Label label) {
  switch (label) {
    case Label::Faithful: return "-1";
    case Label::Unknown: return "0";
    case Label::Hallucinated: return "+1";
  }
  return "?";
}

int label_sign(Label label) {
  switch (label) {
    case Label::Faithful: return -1;
    case Label::Hallucinated: return 1;
    case Label::Unknown: break;
  }
  throw PreconditionError("bag label is unknown");
}

void validate_bag(const Bag& bag, std::size_t dim) {
  const std::string who = "bag " + std::to_string(bag.id);
  if (bag.tokens.rows() < 1) throw PreconditionError(who + ": needs at least one token");
  if (static_cast<std::size_t>(bag.tokens.cols()) != dim) {
    throw DimensionError(who + ": token dimension " + std::to_string(bag.tokens.cols()) +
                         " != store dimension " + std::to_string(dim));
  }
  if (!bag.tokens.allFinite()) throw PreconditionError(who + ": non-finite hidden state");
  if (bag.p_sem && !(*bag.p_sem >= 0.0 && *bag.p_sem <= 1.0)) {
    throw PreconditionError(who + ": p_sem outside [0,1]");
  }
  switch (bag.label) {
    case Label::Faithful:
    case Label::Unknown:
    case Label::Hallucinated: break;
    default: throw PreconditionError(who + ": invalid label");
  }
  if (static_cast<std::uint8_t>(bag.split) >= kNumSplits) {
    throw PreconditionError(who + ": invalid split tag");
  }
}

namespace {

void count_into(ClassCounts& counts, Label label) {
  switch (label) {
    case Label::Hallucinated: ++counts.positive; break;
    case Label::Faithful: ++counts.negative; break;
    case Label::Unknown: ++counts.unknown; break;
  }
}

}  // namespace

void DatasetStore::add(Bag bag) {
  if (dim_ == 0) throw PreconditionError("dataset dimension must be positive");
  validate_bag(bag, dim_);
  count_into(counts_[static_cast<std::size_t>(bag.split)], bag.label);
  bags_.push_back(std::move(bag));
}

void DatasetStore::set_semantic_probability(std::size_t index, std::optional<double> p_sem) {
  if (index >= bags_.size()) throw PreconditionError("bag index out of range");
  if (p_sem && !(*p_sem >= 0.0 && *p_sem <= 1.0)) {
    throw PreconditionError("p_sem outside [0,1]");
  }
  bags_[index].p_sem = p_sem;
}

ClassCounts DatasetStore::total_counts() const {
  ClassCounts total;
  for (const auto& c : counts_) {
    total.positive += c.positive;
    total.negative += c.negative;
    total.unknown += c.unknown;
  }
  return total;
}

std::vector<std::size_t> DatasetStore::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bags_.size(); ++i) {
    if (bags_[i].split == split) out.push_back(i);
  }
  return out;
}

DatasetStore DatasetStore::subset(Split split) const {
  DatasetStore out(dim_);
  for (const auto& bag : bags_) {
    if (bag.split == split) out.add(bag);
  }
  return out;
}

void DatasetStore::validate() const {
  if (dim_ == 0) throw PreconditionError("dataset dimension must be positive");
  std::array<ClassCounts, kNumSplits> recount{};
  for (const auto& bag : bags_) {
    validate_bag(bag, dim_);
    count_into(recount[static_cast<std::size_t>(bag.split)], bag.label);
  }
  if (recount != counts_) throw PreconditionError("class counts disagree with a recount");
}

std::optional<double> class_ratio(std::size_t n_pos, std::size_t n_neg) {
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return static_cast<double>(n_neg) / static_cast<double>(n_pos);
}

DatasetStats dataset_stats(const DatasetStore& store) {
  DatasetStats stats;
  for (const auto& bag : store.bags()) {
    auto& s = stats.splits[static_cast<std::size_t>(bag.split)];
    for (SplitStats* target : {&s, &stats.overall}) {
      ++target->n_bags;
      count_into(target->counts, bag.label);
      ++target->length_histogram[bag.length()];
    }
  }
  for (SplitStats* target :
       {&stats.splits[0], &stats.splits[1], &stats.splits[2], &stats.overall}) {
    target->class_ratio = class_ratio(target->counts.positive, target->counts.negative);
  }
  return stats;
}

}  // namespace halomil
