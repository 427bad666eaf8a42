#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halomil/common.hpp"

namespace halomil {

/// +1 is a hallucinated (positive) response, -1 a faithful one.
enum class Label : std::int8_t { Faithful = -1, Unknown = 0, Hallucinated = 1 };

enum class Split : std::uint8_t { Train = 0, Validation = 1, Test = 2 };

inline constexpr std::size_t kNumSplits = 3;

const char* to_string(Split split);
Split split_from_string(const std::string& name);
const char* to_string(Label label);

/// Signed class value of a known label; throws PreconditionError for Unknown.
int label_sign(Label label);

/// One response: its token hidden states plus bag-level annotations.
struct Bag {
  std::uint64_t id = 0;
  Matrix tokens;  // T x d
  Label label = Label::Unknown;
  std::optional<double> p_sem;
  Split split = Split::Train;

  std::size_t length() const { return static_cast<std::size_t>(tokens.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(tokens.cols()); }
  bool labeled() const { return label != Label::Unknown; }
};

struct ClassCounts {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t unknown = 0;

  std::size_t total() const { return positive + negative + unknown; }
  bool operator==(const ClassCounts&) const = default;
};

/// Bags sharing one hidden dimension, with per-split class counts kept in sync.
class DatasetStore {
 public:
  DatasetStore() = default;
  explicit DatasetStore(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return bags_.size(); }
  bool empty() const { return bags_.empty(); }

  const std::vector<Bag>& bags() const { return bags_; }
  const Bag& operator[](std::size_t i) const { return bags_[i]; }

  /// Validates the bag against the store invariants before appending.
  void add(Bag bag);

  /// Replaces p_sem of bag `index`; value must lie in [0,1].
  void set_semantic_probability(std::size_t index, std::optional<double> p_sem);

  const ClassCounts& counts(Split split) const {
    return counts_[static_cast<std::size_t>(split)];
  }
  ClassCounts total_counts() const;

  /// Indices of bags in `split`, in store order.
  std::vector<std::size_t> indices(Split split) const;

  /// Copy of the store restricted to one split.
  DatasetStore subset(Split split) const;

  /// Throws PreconditionError describing the first broken invariant.
  void validate() const;

 private:
  std::size_t dim_ = 0;
  std::vector<Bag> bags_;
  std::array<ClassCounts, kNumSplits> counts_{};
};

/// Checks a single bag's invariants (shape, finiteness, p_sem range).
void validate_bag(const Bag& bag, std::size_t dim);

struct SplitStats {
  std::size_t n_bags = 0;
  ClassCounts counts;
  /// |S_neg| / |S_pos|; absent unless the split has bags of both classes.
  std::optional<double> class_ratio;
  /// token length -> number of bags of that length
  std::map<std::size_t, std::size_t> length_histogram;
};

struct DatasetStats {
  std::array<SplitStats, kNumSplits> splits;
  SplitStats overall;
};

DatasetStats dataset_stats(const DatasetStore& store);

/// |neg| / |pos|, or nullopt when either class is missing.
std::optional<double> class_ratio(std::size_t n_pos, std::size_t n_neg);

// ---- HSB1 binary format -----------------------------------------------------

inline constexpr std::array<char, 4> kHsbMagic{'H', 'S', 'B', '1'};
inline constexpr std::uint32_t kHsbVersion = 1;
inline constexpr std::size_t kHsbHeaderBytes = 24;
inline constexpr std::size_t kHsbBagHeaderBytes = 20;

std::vector<std::uint8_t> encode_hsb(const DatasetStore& store);
DatasetStore decode_hsb(std::span<const std::uint8_t> bytes);

void write_hsb(const DatasetStore& store, const std::filesystem::path& path);
DatasetStore read_hsb(const std::filesystem::path& path);

/// Free-form per-bag text metadata stored next to an HSB1 file.
using BagMetadata = std::map<std::uint64_t, nlohmann::json>;

std::filesystem::path meta_sidecar_path(const std::filesystem::path& hsb_path);
void write_meta_sidecar(const BagMetadata& meta, const std::filesystem::path& hsb_path);
BagMetadata read_meta_sidecar(const std::filesystem::path& hsb_path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace halomil
