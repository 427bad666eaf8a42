#include "halomil/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "halomil/analysis.hpp"
#include "halomil/parallel.hpp"

namespace halomil {

const char* to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Sgd ? "sgd" : "adam";
}

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw PreconditionError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw PreconditionError("epochs must be >= 1");
  if (batch_size < 1) throw PreconditionError("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw PreconditionError("learning_rate must be > 0");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw PreconditionError("weight_decay must be >= 0");
  }
  if (hidden_dim < 1) throw PreconditionError("D must be >= 1");
  if (!(k_frac > 0.0 && k_frac <= 1.0)) throw PreconditionError("k_frac must lie in (0,1]");
  if (!(lambda >= 0.0)) throw PreconditionError("lambda must be >= 0");
}

TrainConfig default_train_config(Architecture arch) {
  TrainConfig c;
  c.architecture = arch;
  c.optimizer = OptimizerKind::Adam;
  if (arch == Architecture::Hami) {
    c.learning_rate = 1e-3;
    c.weight_decay = 5e-4;
  } else {
    c.learning_rate = 2e-4;
    c.weight_decay = 5e-3;
  }
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) {
    throw PreconditionError("config key '" + key + "': cannot parse '" + value + "'");
  }
  if constexpr (std::is_unsigned_v<T>) {
    if (value.find('-') != std::string::npos) {
      throw PreconditionError("config key '" + key + "' must be non-negative");
    }
  }
  return out;
}

}  // namespace

void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "epochs") {
    c.epochs = parse_number<std::size_t>(key, value);
  } else if (key == "batch_size") {
    c.batch_size = parse_number<std::size_t>(key, value);
  } else if (key == "optimizer") {
    c.optimizer = optimizer_from_string(value);
  } else if (key == "learning_rate" || key == "lr") {
    c.learning_rate = parse_number<double>(key, value);
  } else if (key == "weight_decay" || key == "wd") {
    c.weight_decay = parse_number<double>(key, value);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "arch" || key == "architecture") {
    c.architecture = architecture_from_string(value);
  } else if (key == "D" || key == "hidden_dim") {
    c.hidden_dim = parse_number<std::size_t>(key, value);
  } else if (key == "k_frac") {
    c.k_frac = parse_number<double>(key, value);
  } else if (key == "lambda") {
    c.lambda = parse_number<double>(key, value);
  } else if (key == "threads") {
    c.threads = parse_number<std::size_t>(key, value);
  } else {
    throw PreconditionError("unknown config key '" + key + "'");
  }
}

TrainConfig parse_train_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw PreconditionError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

TrainConfig read_train_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_train_config(buf.str(), std::move(base));
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"optimizer", to_string(c.optimizer)},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"architecture", to_string(c.architecture)},
          {"D", c.hidden_dim},
          {"k_frac", c.k_frac},
          {"lambda", c.lambda}};
}

OptimizerState make_optimizer_state(OptimizerKind kind, const Detector& like) {
  OptimizerState s;
  s.kind = kind;
  if (kind == OptimizerKind::Adam) {
    s.first_moment = zeros_like(like);
    s.second_moment = zeros_like(like);
  }
  return s;
}

void optimizer_step(Detector& params, const GradientSet& grads, OptimizerState& state,
                    const TrainConfig& config) {
  if (state.kind != config.optimizer) {
    throw PreconditionError("optimizer state does not match the configured optimizer");
  }
  auto theta = trainable_blocks(params);
  const auto g = trainable_blocks(grads.values);
  if (theta.size() != g.size()) throw DimensionError("gradient layout does not match parameters");
  const double lr = config.learning_rate;
  const double wd = config.weight_decay;
  ++state.step;

  if (state.kind == OptimizerKind::Sgd) {
    for (std::size_t b = 0; b < theta.size(); ++b) {
      if (theta[b].values.size() != g[b].values.size()) {
        throw DimensionError("gradient block '" + g[b].name + "' has the wrong size");
      }
      for (std::size_t i = 0; i < theta[b].values.size(); ++i) {
        theta[b].values[i] -= lr * (g[b].values[i] + wd * theta[b].values[i]);
      }
    }
    return;
  }

  auto m = trainable_blocks(state.first_moment);
  auto v = trainable_blocks(state.second_moment);
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(kAdamBeta1, t);
  const double c2 = 1.0 - std::pow(kAdamBeta2, t);
  for (std::size_t b = 0; b < theta.size(); ++b) {
    if (theta[b].values.size() != g[b].values.size()) {
      throw DimensionError("gradient block '" + g[b].name + "' has the wrong size");
    }
    for (std::size_t i = 0; i < theta[b].values.size(); ++i) {
      const double gi = g[b].values[i];
      double& mi = m[b].values[i];
      double& vi = v[b].values[i];
      mi = kAdamBeta1 * mi + (1.0 - kAdamBeta1) * gi;
      vi = kAdamBeta2 * vi + (1.0 - kAdamBeta2) * gi * gi;
      const double step = (mi / c1) / (std::sqrt(vi / c2) + kAdamEps);
      double& th = theta[b].values[i];
      th -= lr * (step + wd * th);
    }
  }
}

BatchStats hami_batch_stats(const HamiParams& params, const std::vector<const Bag*>& bags) {
  const auto h = static_cast<Eigen::Index>(params.hidden_dim());
  Vector sum = Vector::Zero(h);
  std::size_t count = 0;
  for (const Bag* bag : bags) {
    Matrix pre = (1.0 + hami_scale_for(params, *bag)) * (bag->tokens * params.W.transpose());
    pre.rowwise() += params.b1.transpose();
    sum += pre.colwise().sum().transpose();
    count += bag->length();
  }
  if (count == 0) throw PreconditionError("batch statistics need at least one token");
  BatchStats stats;
  stats.mean = sum / static_cast<double>(count);
  // Second pass around the mean avoids cancellation.
  Vector var = Vector::Zero(h);
  for (const Bag* bag : bags) {
    Matrix pre = (1.0 + hami_scale_for(params, *bag)) * (bag->tokens * params.W.transpose());
    pre.rowwise() += params.b1.transpose() - stats.mean.transpose();
    var += pre.array().square().matrix().colwise().sum().transpose();
  }
  stats.std = (var / static_cast<double>(count)).cwiseSqrt();
  return stats;
}

void update_running_stats(HamiParams& params, const BatchStats& batch, double momentum) {
  params.bn.running_mean = (1.0 - momentum) * params.bn.running_mean + momentum * batch.mean;
  params.bn.running_std = (1.0 - momentum) * params.bn.running_std + momentum * batch.std;
}

namespace {

void check_training_data(const DatasetStore& store, const TrainConfig& config) {
  config.validate();
  if (store.dim() == 0) throw PreconditionError("dataset has no hidden dimension");
  const auto& tr = store.counts(Split::Train);
  if (tr.positive + tr.negative == 0) {
    throw PreconditionError("train split has no labeled bags");
  }
  const auto& va = store.counts(Split::Validation);
  if (va.positive == 0 || va.negative == 0) {
    throw PreconditionError(
        "validation split must contain both classes (AUROC is undefined otherwise)");
  }
  if (config.architecture == Architecture::Hami && config.lambda > 0.0) {
    for (const auto& bag : store.bags()) {
      if (bag.split == Split::Test || !bag.labeled()) continue;
      if (!bag.p_sem) {
        throw PreconditionError("bag " + std::to_string(bag.id) +
                                " is missing p_sem, required for HaMI with lambda > 0");
      }
    }
  }
}

std::vector<std::size_t> labeled_indices(const DatasetStore& store, Split split) {
  std::vector<std::size_t> out;
  for (auto i : store.indices(split)) {
    if (store[i].labeled()) out.push_back(i);
  }
  return out;
}

struct ValidationScore {
  double auroc = 0.0;
  double margin = 0.0;
};

ValidationScore evaluate(const Detector& det, const DatasetStore& store,
                         const std::vector<std::size_t>& idx, std::size_t threads) {
  std::vector<double> z(idx.size());
  parallel_for(idx.size(), threads, [&](std::size_t i) { z[i] = score_bag(det, store[idx[i]]).logit; });
  std::vector<int> y(idx.size());
  double margin = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    y[i] = label_sign(store[idx[i]].label);
    margin += y[i] * z[i];
  }
  return {auroc(z, y), margin / static_cast<double>(idx.size())};
}

}  // namespace

TrainResult train(const DatasetStore& store, const TrainConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  DetectorShape shape;
  shape.input_dim = store.dim();
  shape.hidden_dim = config.hidden_dim;
  shape.k_frac = config.k_frac;
  shape.lambda = config.lambda;
  if (store.dim() == 0) throw PreconditionError("dataset has no hidden dimension");
  return train_from(store, config, init_detector(config.architecture, shape, rng));
}

TrainResult train_from(const DatasetStore& store, const TrainConfig& config, Detector det) {
  check_training_data(store, config);
  if (det.arch != config.architecture) {
    throw PreconditionError("initial detector architecture does not match the config");
  }
  if (det.input_dim() != store.dim()) {
    throw DimensionError("initial detector input dimension does not match the dataset");
  }
  // Shuffling draws from a stream separate from initialization.
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  auto train_idx = labeled_indices(store, Split::Train);
  const auto val_idx = labeled_indices(store, Split::Validation);

  auto opt = make_optimizer_state(config.optimizer, det);
  TrainResult result;
  double best_auroc = -1.0;
  std::vector<BagGradient> per_bag;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < train_idx.size(); lo += config.batch_size) {
      const std::size_t hi = std::min(train_idx.size(), lo + config.batch_size);
      const std::size_t n = hi - lo;

      std::optional<BatchStats> stats;
      if (auto* hp = std::get_if<HamiParams>(&det.params)) {
        std::vector<const Bag*> batch;
        for (std::size_t i = lo; i < hi; ++i) batch.push_back(&store[train_idx[i]]);
        stats = hami_batch_stats(*hp, batch);
      }
      per_bag.resize(n);
      parallel_for(n, config.threads, [&](std::size_t i) {
        per_bag[i] = grad_bag(det, store[train_idx[lo + i]], stats ? &*stats : nullptr);
      });

      GradientSet mean_grad{zeros_like(det), 0.0};
      auto acc = trainable_blocks(mean_grad.values);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        loss_sum += per_bag[i].loss;
        const auto g = trainable_blocks(per_bag[i].grads.values);
        for (std::size_t b = 0; b < acc.size(); ++b) {
          for (std::size_t k = 0; k < acc[b].values.size(); ++k) acc[b].values[k] += g[b].values[k];
        }
      }
      for (auto& block : acc) {
        for (double& v : block.values) v *= inv_n;
      }
      optimizer_step(det, mean_grad, opt, config);
      if (stats) update_running_stats(std::get<HamiParams>(det.params), *stats);
    }

    const auto val = evaluate(det, store, val_idx, config.threads);
    EpochLog entry;
    entry.epoch = epoch;
    entry.loss = loss_sum / static_cast<double>(train_idx.size());
    entry.val_auroc = val.auroc;
    entry.margin = val.margin;
    entry.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(entry);
    if (val.auroc > best_auroc) {
      best_auroc = val.auroc;
      result.best = det;
      result.best_epoch = epoch;
    }
  }
  return result;
}

std::string epoch_log_csv(const std::vector<EpochLog>& log, bool include_seconds) {
  std::string out = include_seconds ? "epoch,loss,val_auroc,margin,seconds\n"
                                    : "epoch,loss,val_auroc,margin\n";
  char buf[160];
  for (const auto& e : log) {
    int n = std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g", e.epoch, e.loss, e.val_auroc,
                          e.margin);
    out.append(buf, static_cast<std::size_t>(n));
    if (include_seconds) {
      n = std::snprintf(buf, sizeof buf, ",%.6f", e.seconds);
      out.append(buf, static_cast<std::size_t>(n));
    }
    out += '\n';
  }
  return out;
}

}  // namespace halomil
