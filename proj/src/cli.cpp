#include "halomil/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "halomil/analysis.hpp"
#include "halomil/bagstore.hpp"
#include "halomil/detectors.hpp"
#include "halomil/semantics.hpp"
#include "halomil/synthgen.hpp"
#include "halomil/training.hpp"

namespace halomil {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_hash(const fs::path& path) { return hex64(fnv1a64(read_file_bytes(path))); }

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span<const std::uint8_t>(
                             reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Run record next to the primary output: written when the command starts and
/// rewritten with the outcome when it ends.
class Manifest {
 public:
  Manifest(std::string subcommand, const fs::path& primary_output, json config,
           const std::vector<fs::path>& inputs, std::optional<std::uint64_t> seed) {
    if (primary_output.empty()) return;
    path_ = fs::path(primary_output.string() + ".manifest.json");
    doc_["subcommand"] = std::move(subcommand);
    doc_["config"] = std::move(config);
    doc_["toolkit_version"] = kToolkitVersion;
    doc_["seed"] = seed ? json(*seed) : json(nullptr);
    json hashes = json::object();
    for (const auto& in : inputs) hashes[in.string()] = "fnv1a64:" + file_hash(in);
    doc_["input_hashes"] = std::move(hashes);
    doc_["started_at"] = utc_now();
    doc_["finished_at"] = nullptr;
    doc_["status"] = "running";
    flush();
  }

  Manifest(const Manifest&) = delete;
  Manifest& operator=(const Manifest&) = delete;

  /// A command that throws leaves a "failed" record behind.
  ~Manifest() {
    if (path_.empty() || finished_) return;
    try {
      finish("failed");
    } catch (...) {
    }
  }

  void finish(const std::string& status) {
    if (path_.empty()) return;
    finished_ = true;
    doc_["finished_at"] = utc_now();
    doc_["status"] = status;
    flush();
  }

 private:
  void flush() { write_text(path_, doc_.dump(2) + "\n"); }
  fs::path path_;
  json doc_;
  bool finished_ = false;
};

std::size_t resolve_thread_flag(std::size_t flag) {
  if (const char* env = std::getenv("HALOMIL_THREADS"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
      throw PreconditionError(std::string("HALOMIL_THREADS must be a non-negative integer, got '") +
                              env + "'");
    }
    return static_cast<std::size_t>(v);
  }
  return flag;
}

json empty_report() {
  return {{"margins", nullptr},   {"gamma", nullptr},          {"inv_gamma", nullptr},
          {"class_ratio", nullptr}, {"condition_holds", nullptr}, {"eq1_holds", nullptr},
          {"eq2_holds", nullptr}, {"eq3_holds", nullptr},      {"cbar_int", nullptr},
          {"bounds", nullptr},    {"auroc", nullptr},          {"throughput", nullptr},
          {"checks", json::object()}};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json margins_json(const MarginReport& m) {
  return {{"mean", m.mean},
          {"mean_positive", optional_json(m.mean_positive)},
          {"mean_negative", optional_json(m.mean_negative)},
          {"n", m.margins.size()},
          {"skipped_unknown", m.skipped_unknown}};
}

void emit(const json& doc, const std::string& out_path, std::ostream& out) {
  const std::string text = doc.dump(2) + "\n";
  if (out_path.empty()) {
    out << text;
  } else {
    write_text(out_path, text);
  }
}

DatasetStore select_split(const DatasetStore& store, const std::string& split) {
  if (split == "all") return store;
  return store.subset(split_from_string(split));
}

std::optional<double> auroc_if_defined(const Detector& det, const DatasetStore& store) {
  std::vector<double> z;
  std::vector<int> y;
  bool pos = false, neg = false;
  for (const auto& bag : store.bags()) {
    if (!bag.labeled()) continue;
    z.push_back(score_bag(det, bag).logit);
    y.push_back(label_sign(bag.label));
    (y.back() > 0 ? pos : neg) = true;
  }
  if (!pos || !neg) return std::nullopt;
  return auroc(z, y);
}

// ---- synth -----------------------------------------------------------------------

struct SynthArgs {
  bool sparse = false, separable = false;
  SparseSpec spec;
  double margin = 1.0;
  std::string out;
};

void cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.sparse == a.separable) throw PreconditionError("choose exactly one of --sparse or --separable");
  json config = a.sparse ? to_json(a.spec) : json{{"n", a.spec.n_bags}, {"d", a.spec.d},
                                                  {"margin", a.margin}, {"seed", a.spec.seed}};
  config["mode"] = a.sparse ? "sparse" : "separable";
  Manifest manifest("synth", a.out, config, {}, a.spec.seed);
  json summary;
  if (a.sparse) {
    const auto planted = planted_params(a.spec);
    auto data = generate_sparse_bags(a.spec, planted);
    const auto bytes = encode_hsb(data.store);
    const auto reread = decode_hsb(bytes);
    const auto check = verify_assumption(reread, data.certificates, planted, a.spec);
    if (!check.ok) {
      throw PreconditionError("generated data violates the sparsity assumption (" +
                              std::to_string(check.violations.size()) + " violations)");
    }
    const Detector planted_det{Architecture::MaxPool, planted};
    const auto ckpt = encode_checkpoint(planted_det, {{"role", "planted"}});
    write_file_bytes(a.out, bytes);
    write_file_bytes(a.out + ".planted.ckpt", ckpt);
    write_text(a.out + ".cert.json",
               certificate_json(a.spec, data.certificates, fnv1a64(ckpt)).dump(1) + "\n");
    summary = {{"bags", data.store.size()}, {"verify_ok", true}, {"mode", "sparse"}};
  } else {
    const auto store = generate_separable_bags(a.spec.n_bags, a.spec.d, a.margin, a.spec.seed);
    write_hsb(store, a.out);
    summary = {{"bags", store.size()}, {"mode", "separable"}};
  }
  out << summary.dump() << "\n";
  manifest.finish("ok");
}

// ---- train -----------------------------------------------------------------------

struct TrainArgs {
  std::string arch, data, out, config_file, log;
  std::map<std::string, std::string> overrides;
  std::size_t threads = 0;
};

void cmd_train(const TrainArgs& a, std::ostream& out) {
  auto config = default_train_config(architecture_from_string(a.arch));
  if (!a.config_file.empty()) config = read_train_config(a.config_file, config);
  for (const auto& [k, v] : a.overrides) set_config_value(config, k, v);
  config.architecture = architecture_from_string(a.arch);
  config.threads = resolve_thread_flag(a.threads);
  config.validate();

  std::vector<fs::path> inputs{a.data};
  if (!a.config_file.empty()) inputs.emplace_back(a.config_file);
  Manifest manifest("train", a.out, to_json(config), inputs, config.seed);
  const auto store = read_hsb(a.data);
  const auto result = train(store, config);
  json extra = {{"best_epoch", result.best_epoch}, {"config", to_json(config)}};
  write_checkpoint(result.best, a.out, extra);
  const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
  write_text(log_path, epoch_log_csv(result.log));
  for (const auto& e : result.log) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %zu loss %.6f val_auroc %.6f margin %.6f\n", e.epoch,
                  e.loss, e.val_auroc, e.margin);
    out << line;
  }
  out << "best epoch " << result.best_epoch << "\n";
  manifest.finish("ok");
}

// ---- eval ------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, out, split = "all", scores;
  std::size_t threads = 0;
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  Manifest manifest("eval", a.out, {{"split", a.split}}, {a.ckpt, a.data}, std::nullopt);
  const auto det = read_checkpoint(a.ckpt);
  const auto store = select_split(read_hsb(a.data), a.split);
  if (store.empty()) throw PreconditionError("no bags in split '" + a.split + "'");
  auto report = empty_report();
  report["margins"] = margins_json(bag_margins(det, store, std::nullopt, resolve_thread_flag(a.threads)));
  report["auroc"] = optional_json(auroc_if_defined(det, store));
  report["checks"]["architecture"] = to_string(det.arch);
  report["checks"]["n_bags"] = store.size();
  if (!a.scores.empty()) {
    std::string csv = "bag_id,label,logit,probability\n";
    char buf[128];
    for (const auto& bag : store.bags()) {
      const auto s = score_bag(det, bag);
      const int n = std::snprintf(buf, sizeof buf, "%llu,%d,%.17g,%.17g\n",
                                  static_cast<unsigned long long>(bag.id),
                                  static_cast<int>(bag.label), s.logit, s.probability);
      csv.append(buf, static_cast<std::size_t>(n));
    }
    write_text(a.scores, csv);
  }
  emit(report, a.out, out);
  manifest.finish("ok");
}

// ---- analyze ---------------------------------------------------------------------

struct AnalyzeArgs {
  int theorem = 0;
  bool rademacher = false;
  std::optional<double> beta;
  std::string data, ckpt, out, cert, hist, split = "all";
  double lambda = 1.0;
  std::size_t steps = 1000;
  std::vector<double> etas{1e-3, 1e-4, 1e-5};
  std::vector<std::size_t> sweep{5, 10, 20};
  std::size_t sweep_bags = 100;
  double R = 1, B1 = 1, B2 = 1, D = 256, d = 4096, T = 20, n = 1000;
  std::size_t bins = 20;
};

void analyze_theorem1(const AnalyzeArgs& a, const Detector& det, const DatasetStore& store,
                      json& report) {
  const auto* hp = std::get_if<HamiParams>(&det.params);
  if (!hp) throw PreconditionError("--theorem 1 needs a HaMI checkpoint");
  HamiParams p = *hp;
  p.lambda = 0.0;
  std::vector<double> cbar(store.size()), cbar_int(store.size());
  std::size_t invariant = 0, labeled = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& bag = store[i];
    cbar[i] = bag_sensitivity(p, bag);
    if (!bag.labeled()) continue;
    ++labeled;
    if (!bag.p_sem) throw PreconditionError("bag " + std::to_string(bag.id) + " is missing p_sem");
    const double pt = a.lambda * *bag.p_sem;
    cbar_int[i] = pt > 0.0 ? path_integrated_sensitivity(p, bag, pt, a.steps) : cbar[i];
    if (region_invariant(p, bag, pt)) ++invariant;
  }
  const auto sens = gamma_and_condition(store, cbar);
  const auto sens_int = gamma_and_condition(store, cbar_int);
  const double predicted = predicted_margin_delta(store, cbar, a.lambda);
  const double predicted_int = predicted_margin_delta(store, cbar_int, a.lambda);
  const double m0 = hami_margin_at(p, store, 0.0);
  const double m1 = hami_margin_at(p, store, a.lambda);

  report["gamma"] = sens.gamma;
  report["inv_gamma"] = sens.inv_gamma;
  report["class_ratio"] = sens.class_ratio;
  report["condition_holds"] = sens.condition_holds;
  report["eq1_holds"] = sens.eq1_holds;
  report["eq2_holds"] = sens.eq2_holds;
  report["eq3_holds"] = sens.eq3_holds;
  report["margins"] = {{"mean_lambda0", m0}, {"mean_lambda", m1}, {"lambda", a.lambda}};
  auto means = [](const ClassMeans& c) {
    return json{{"p_sem", c.p_sem}, {"cbar", c.cbar}, {"product", c.product}};
  };
  report["cbar_int"] = {{"steps", a.steps},       {"pos", means(sens_int.pos)},
                        {"neg", means(sens_int.neg)}, {"gamma", sens_int.gamma},
                        {"inv_gamma", sens_int.inv_gamma},
                        {"condition_holds", sens_int.condition_holds}};
  auto& c = report["checks"]["theorem1"];
  c["pos"] = means(sens.pos);
  c["neg"] = means(sens.neg);
  c["n_pos"] = sens.n_pos;
  c["n_neg"] = sens.n_neg;
  c["fraction_cbar_positive"] = sens.fraction_cbar_positive;
  c["predicted_delta_margin"] = predicted;
  c["predicted_delta_margin_int"] = predicted_int;
  c["measured_delta_margin"] = m1 - m0;
  c["region_invariant_bags"] = invariant;
  c["labeled_bags"] = labeled;
  c["identity_applicable"] = invariant == labeled;
  c["identity_error"] = std::abs(predicted - (m1 - m0));
  c["identity_error_int"] = std::abs(predicted_int - (m1 - m0));
  c["margin_increased"] = m1 > m0;

  if (!a.hist.empty()) {
    std::vector<double> prod;
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store[i].labeled()) prod.push_back(*store[i].p_sem * cbar_int[i]);
    }
    write_text(a.hist + ".cbar.csv", histogram_csv(sens.cbar, a.bins));
    write_text(a.hist + ".cbar_int.csv", histogram_csv(sens_int.cbar, a.bins));
    write_text(a.hist + ".product.csv", histogram_csv(prod, a.bins));
  }
}

void analyze_theorem2(const AnalyzeArgs& a, const Detector& det, const DatasetStore& store,
                      json& report) {
  if (a.etas.size() < 2) throw PreconditionError("--etas needs at least two step sizes");
  std::vector<double> slopes, delta_at_mid;
  std::size_t nonpositive = 0, with_gradient = 0;
  const double mid_eta = a.etas[a.etas.size() / 2];
  for (const auto& bag : store.bags()) {
    if (!bag.labeled()) continue;
    std::vector<double> res;
    bool usable = true;
    for (double eta : a.etas) {
      const auto step = margin_step(det, bag, eta);
      if (step.first_order == 0.0) {
        usable = false;
        break;
      }
      if (eta == mid_eta) delta_at_mid.push_back(step.delta_margin);
      if (!(step.delta_margin > 0.0)) ++nonpositive;
      res.push_back(step.residual);
    }
    if (!usable) continue;
    ++with_gradient;
    if (std::all_of(res.begin(), res.end(), [](double r) { return r > 0.0; })) {
      slopes.push_back(loglog_slope(a.etas, res));
    }
  }
  if (with_gradient == 0) throw PreconditionError("no labeled bag has a nonzero gradient");
  double mean_delta = 0.0;
  for (double v : delta_at_mid) mean_delta += v;
  mean_delta /= static_cast<double>(delta_at_mid.size());
  std::sort(slopes.begin(), slopes.end());
  const double median = slopes.empty() ? std::nan("") : slopes[slopes.size() / 2];
  auto& c = report["checks"]["theorem2"];
  c["etas"] = a.etas;
  c["bags_with_gradient"] = with_gradient;
  c["mean_delta_margin"] = mean_delta;
  c["mean_delta_margin_eta"] = mid_eta;
  c["expected_margin_increases"] = mean_delta > 0.0;
  c["nonpositive_steps"] = nonpositive;
  c["residual_slope_median"] = slopes.empty() ? json(nullptr) : json(median);
  c["residual_slope_ok"] = !slopes.empty() && std::abs(median - 2.0) <= 0.3;
  report["margins"] = margins_json(bag_margins(det, store));
}

void analyze_theorem3(const AnalyzeArgs& a, const Detector& det, const DatasetStore& store,
                      json& report) {
  const auto* mp = std::get_if<MaxPoolParams>(&det.params);
  if (!mp) throw PreconditionError("--theorem 3 needs a max-pool, mean-pool or pool-first checkpoint");
  const std::string cert_path = a.cert.empty() ? a.data + ".cert.json" : a.cert;
  json cert_doc;
  {
    std::ifstream in(cert_path);
    if (!in) throw IoError("cannot open certificate '" + cert_path + "'");
    try {
      cert_doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw PreconditionError(cert_path + ": " + e.what());
    }
  }
  const auto spec = sparse_spec_from_json(cert_doc.at("spec"));
  const auto certs = certificates_from_json(cert_doc);
  const double c1 = std::min(spec.u_lo * spec.u_lo, spec.g_lo * spec.g_lo);
  const double c2 = std::max(spec.u_hi * spec.u_hi, spec.g_hi * spec.g_hi);

  const auto check = verify_assumption(store, certs, *mp, spec);
  std::size_t measured = 0, violations = 0;
  double min_slack = std::numeric_limits<double>::infinity();
  for (const auto& bag : store.bags()) {
    const auto r = gradient_norm_ratio(*mp, bag);
    if (!r) continue;
    ++measured;
    const double ts = static_cast<double>(bag.length()) / static_cast<double>(spec.s);
    const double bound = c1 / c2 * ts * ts;
    min_slack = std::min(min_slack, *r / bound);
    if (*r < bound) ++violations;
  }

  std::vector<double> levels, mean_ratios;
  const auto planted = planted_params(spec);
  for (std::size_t ts : a.sweep) {
    SparseSpec sw = spec;
    sw.T = ts * spec.s;
    sw.n_bags = a.sweep_bags;
    sw.positive_fraction = 1.0;
    const auto data = generate_sparse_bags(sw, planted);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& bag : data.store.bags()) {
      if (const auto r = gradient_norm_ratio(planted, bag)) {
        sum += *r;
        ++n;
      }
    }
    levels.push_back(static_cast<double>(ts));
    mean_ratios.push_back(sum / static_cast<double>(n));
  }
  const double slope = loglog_slope(levels, mean_ratios);

  auto& c = report["checks"]["theorem3"];
  c["c1"] = c1;
  c["c2"] = c2;
  c["s"] = spec.s;
  c["assumption_ok"] = check.ok;
  c["assumption_violations"] = check.violations.size();
  c["bags_measured"] = measured;
  c["bound_violations"] = violations;
  c["bound_holds_all"] = measured > 0 && violations == 0;
  c["min_ratio_over_bound"] = measured > 0 ? json(min_slack) : json(nullptr);
  c["sweep_T_over_s"] = levels;
  c["sweep_mean_ratio"] = mean_ratios;
  c["slope"] = slope;
  c["slope_ok"] = std::abs(slope - 2.0) <= 0.2;
}

void cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  if (a.theorem == 0 && !a.rademacher && !a.beta) {
    throw PreconditionError("choose --theorem 1|2|3, --rademacher and/or --beta");
  }
  if (a.theorem < 0 || a.theorem > 3) throw PreconditionError("--theorem must be 1, 2 or 3");
  std::vector<fs::path> inputs;
  if (a.theorem) {
    if (a.data.empty() || a.ckpt.empty()) throw PreconditionError("--theorem needs --data and --ckpt");
    inputs = {a.data, a.ckpt};
  }
  json config = {{"theorem", a.theorem}, {"rademacher", a.rademacher}, {"lambda", a.lambda},
                 {"steps", a.steps}, {"split", a.split}};
  Manifest manifest("analyze", a.out, config, inputs, std::nullopt);
  auto report = empty_report();
  if (a.theorem) {
    const auto det = read_checkpoint(a.ckpt);
    const auto store = select_split(read_hsb(a.data), a.split);
    if (store.empty()) throw PreconditionError("no bags in split '" + a.split + "'");
    report["auroc"] = optional_json(auroc_if_defined(det, store));
    if (a.theorem == 1) analyze_theorem1(a, det, store, report);
    if (a.theorem == 2) analyze_theorem2(a, det, store, report);
    if (a.theorem == 3) analyze_theorem3(a, det, store, report);
  }
  if (a.rademacher || a.beta) {
    json bounds = json::object();
    if (a.rademacher) {
      const auto b = rademacher_bounds(a.R, a.B1, a.B2, a.D, a.d, a.T, a.n);
      bounds = {{"R", b.R}, {"B1", b.B1}, {"B2", b.B2}, {"D", b.D}, {"d", b.d},
                {"T", b.T}, {"n", b.n},   {"feat", b.feat}, {"base", b.base}};
    }
    if (a.beta) {
      bounds["beta"] = *a.beta;
      bounds["eta_max"] = beta_step_bound(*a.beta);
    }
    report["bounds"] = bounds;
  }
  emit(report, a.out, out);
  manifest.finish("ok");
}

// ---- bench -----------------------------------------------------------------------

struct BenchArgs {
  std::string ckpt, data, out, split = "test";
  std::size_t repeats = 3, threads = 0;
};

void cmd_bench(const BenchArgs& a, std::ostream& out) {
  Manifest manifest("bench", a.out, {{"split", a.split}, {"repeats", a.repeats}}, {a.ckpt, a.data},
                    std::nullopt);
  const auto det = read_checkpoint(a.ckpt);
  const auto store = select_split(read_hsb(a.data), a.split);
  const auto t = throughput_bench(det, store, a.repeats, resolve_thread_flag(a.threads));
  auto report = empty_report();
  report["throughput"] = {{"single_thread", t.single_thread}, {"multi_thread", t.multi_thread},
                          {"threads", t.threads},             {"samples", t.samples},
                          {"repeats", a.repeats},             {"architecture", to_string(det.arch)}};
  emit(report, a.out, out);
  manifest.finish("ok");
}

// ---- cluster ---------------------------------------------------------------------

struct ClusterArgs {
  std::string relations, data, out;
};

void cmd_cluster(const ClusterArgs& a, std::ostream& out) {
  Manifest manifest("cluster", a.out, json::object(), {a.relations, a.data}, std::nullopt);
  auto store = read_hsb(a.data);
  const auto records = read_relation_file(a.relations);
  const auto res = apply_semantic_probabilities(store, records);
  write_hsb(store, a.out);
  out << json{{"records", records.size()},
              {"bags_updated", res.bags_updated},
              {"samples_without_bag", res.samples_without_bag}}
             .dump()
      << "\n";
  manifest.finish("ok");
}

// ---- convert ---------------------------------------------------------------------

std::string store_to_csv(const DatasetStore& store) {
  std::string csv = "bag_id,label,split,p_sem,token";
  for (std::size_t k = 0; k < store.dim(); ++k) csv += ",h" + std::to_string(k);
  csv += '\n';
  char buf[64];
  for (const auto& bag : store.bags()) {
    for (std::size_t t = 0; t < bag.length(); ++t) {
      int n = std::snprintf(buf, sizeof buf, "%llu,%d,%s,", static_cast<unsigned long long>(bag.id),
                            static_cast<int>(bag.label), to_string(bag.split));
      csv.append(buf, static_cast<std::size_t>(n));
      if (bag.p_sem) {
        n = std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(static_cast<float>(*bag.p_sem)));
        csv.append(buf, static_cast<std::size_t>(n));
      }
      csv += "," + std::to_string(t);
      for (std::size_t k = 0; k < store.dim(); ++k) {
        const double v = bag.tokens(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k));
        n = std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(static_cast<float>(v)));
        csv.append(buf, static_cast<std::size_t>(n));
      }
      csv += '\n';
    }
  }
  return csv;
}

DatasetStore store_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw PreconditionError("CSV is empty");
  const auto n_cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (n_cols < 6 || line.rfind("bag_id,label,split,p_sem,token", 0) != 0) {
    throw PreconditionError("CSV header must start with bag_id,label,split,p_sem,token,h0");
  }
  const std::size_t dim = n_cols - 5;
  DatasetStore store(dim);
  std::optional<Bag> current;
  std::vector<std::vector<double>> rows;
  auto flush = [&] {
    if (!current) return;
    current->tokens.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t t = 0; t < rows.size(); ++t) {
      for (std::size_t k = 0; k < dim; ++k) {
        current->tokens(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = rows[t][k];
      }
    }
    store.add(std::move(*current));
    current.reset();
    rows.clear();
  };
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    const std::string where = "CSV line " + std::to_string(line_no);
    if (f.size() != n_cols) throw PreconditionError(where + ": expected " + std::to_string(n_cols) + " fields");
    try {
      const auto id = std::stoull(f[0]);
      const auto token = std::stoull(f[4]);
      if (!current || current->id != id) {
        flush();
        current.emplace();
        current->id = id;
        const int label = std::stoi(f[1]);
        if (label < -1 || label > 1) throw PreconditionError(where + ": label must be -1, 0 or 1");
        current->label = static_cast<Label>(label);
        current->split = split_from_string(f[2]);
        if (!f[3].empty()) current->p_sem = std::stod(f[3]);
      }
      if (token != rows.size()) throw PreconditionError(where + ": tokens must be listed in order");
      std::vector<double> row(dim);
      for (std::size_t k = 0; k < dim; ++k) row[k] = std::stod(f[5 + k]);
      rows.push_back(std::move(row));
    } catch (const std::logic_error&) {
      throw PreconditionError(where + ": malformed number");
    }
  }
  flush();
  return store;
}

struct ConvertArgs {
  std::string in, out, to;
};

void cmd_convert(const ConvertArgs& a, std::ostream&) {
  std::string to = a.to;
  if (to.empty()) to = fs::path(a.out).extension() == ".csv" ? "csv" : "hsb";
  if (to != "csv" && to != "hsb") throw PreconditionError("--to must be csv or hsb");
  Manifest manifest("convert", a.out, {{"to", to}}, {a.in}, std::nullopt);
  if (to == "csv") {
    write_text(a.out, store_to_csv(read_hsb(a.in)));
  } else {
    const auto bytes = read_file_bytes(a.in);
    write_hsb(store_from_csv(std::string(bytes.begin(), bytes.end())), a.out);
  }
  manifest.finish("ok");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"halomil: MIL hallucination-detection toolkit", "halomil"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate synthetic bags");
  s->add_flag("--sparse", synth.sparse, "sparse MIL bags with an Assumption-1 certificate");
  s->add_flag("--separable", synth.separable, "linearly separable max-pooled bags");
  s->add_option("--T", synth.spec.T, "tokens per bag");
  s->add_option("--s", synth.spec.s, "informative tokens per active channel");
  s->add_option("--n", synth.spec.n_bags, "number of bags");
  s->add_option("--d", synth.spec.d, "hidden dimension");
  s->add_option("--D", synth.spec.D, "planted channels");
  s->add_option("--u-lo", synth.spec.u_lo);
  s->add_option("--u-hi", synth.spec.u_hi);
  s->add_option("--g-lo", synth.spec.g_lo);
  s->add_option("--g-hi", synth.spec.g_hi);
  s->add_option("--noise", synth.spec.noise);
  s->add_option("--distractor", synth.spec.distractor);
  s->add_option("--positive-fraction", synth.spec.positive_fraction);
  s->add_flag("--p-sem", synth.spec.with_p_sem, "attach semantic probabilities");
  s->add_option("--margin", synth.margin, "separable mode margin");
  s->add_option("--seed", synth.spec.seed);
  s->add_option("-o,--out", synth.out, "output HSB1 file")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a detector");
  t->add_option("--arch", tr.arch, "maxpool, meanpool, attention, gated_attention, hami, poolfirst")
      ->required();
  t->add_option("--data", tr.data, "HSB1 input")->required();
  t->add_option("-o,--out", tr.out, "checkpoint output")->required();
  t->add_option("--config", tr.config_file, "key=value config file");
  t->add_option("--log", tr.log, "epoch CSV (default <out>.log.csv)");
  t->add_option("--threads", tr.threads, "0 = all cores");
  const std::vector<std::pair<std::string, std::string>> train_flags{
      {"--epochs", "epochs"}, {"--batch-size", "batch_size"}, {"--optimizer", "optimizer"},
      {"--lr", "learning_rate"}, {"--wd", "weight_decay"},   {"--seed", "seed"},
      {"--D", "hidden_dim"},  {"--k-frac", "k_frac"},        {"--lambda", "lambda"}};
  std::map<std::string, std::string> train_values;
  for (const auto& [flag, key] : train_flags) {
    t->add_option(flag, train_values[key]);
  }

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score bags with a checkpoint");
  e->add_option("--ckpt", ev.ckpt)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("-o,--out", ev.out, "report JSON (stdout when absent)");
  e->add_option("--split", ev.split, "all, train, validation or test");
  e->add_option("--scores", ev.scores, "per-bag score CSV");
  e->add_option("--threads", ev.threads);

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "theory checks and bound calculators");
  a->add_option("--theorem", an.theorem, "1 (scaling margin), 2 (margin dynamics), 3 (gradient ratio)");
  a->add_flag("--rademacher", an.rademacher);
  a->add_option("--beta", an.beta);
  a->add_option("--data", an.data);
  a->add_option("--ckpt", an.ckpt);
  a->add_option("--cert", an.cert, "certificate (default <data>.cert.json)");
  a->add_option("-o,--out", an.out);
  a->add_option("--split", an.split);
  a->add_option("--lambda", an.lambda);
  a->add_option("--steps", an.steps);
  a->add_option("--etas", an.etas)->delimiter(',');
  a->add_option("--sweep", an.sweep, "T/s levels")->delimiter(',');
  a->add_option("--sweep-bags", an.sweep_bags);
  a->add_option("--hist", an.hist, "CSV histogram prefix");
  a->add_option("--bins", an.bins);
  a->add_option("--R", an.R);
  a->add_option("--B1", an.B1);
  a->add_option("--B2", an.B2);
  a->add_option("--feature-dim", an.D);
  a->add_option("--input-dim", an.d);
  a->add_option("--tokens", an.T);
  a->add_option("--samples", an.n);

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "inference throughput");
  b->add_option("--ckpt", be.ckpt)->required();
  b->add_option("--data", be.data)->required();
  b->add_option("-o,--out", be.out);
  b->add_option("--split", be.split);
  b->add_option("--repeats", be.repeats);
  b->add_option("--threads", be.threads);

  ClusterArgs cl;
  auto* c = app.add_subcommand("cluster", "attach semantic probabilities from relation JSON");
  c->add_option("--relations", cl.relations)->required();
  c->add_option("--data", cl.data)->required();
  c->add_option("-o,--out", cl.out)->required();

  ConvertArgs cv;
  auto* v = app.add_subcommand("convert", "HSB1 <-> CSV");
  v->add_option("-i,--in", cv.in)->required();
  v->add_option("-o,--out", cv.out)->required();
  v->add_option("--to", cv.to, "csv or hsb (default from the output extension)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& ex) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& ex) {
    err << "E: usage: " << ex.what() << "\n";
    return 2;
  }

  try {
    if (s->parsed()) {
      cmd_synth(synth, out);
    } else if (t->parsed()) {
      for (const auto& [flag, key] : train_flags) {
        if (t->count(flag) > 0) tr.overrides[key] = train_values[key];
      }
      cmd_train(tr, out);
    } else if (e->parsed()) {
      cmd_eval(ev, out);
    } else if (a->parsed()) {
      cmd_analyze(an, out);
    } else if (b->parsed()) {
      cmd_bench(be, out);
    } else if (c->parsed()) {
      cmd_cluster(cl, out);
    } else if (v->parsed()) {
      cmd_convert(cv, out);
    }
  } catch (const std::exception& ex) {
    err << "E: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace halomil
