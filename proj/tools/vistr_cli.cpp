// vistr: scene import, synthetic generation, training, retrieval,
// localisation, evaluation and benchmarking behind one binary.
//
// Settings come from (highest first) command-line flags, the JSON file given
// with --config, then built-in defaults. Every flag has a config key; see
// README.md for the table.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "vistr/vistr.hpp"

namespace {

using json = nlohmann::json;
using namespace vistr;

// ---------------------------------------------------------------------------
// Logging. VISTR_LOG=error|warn|info|debug, default info; everything goes to
// stderr so stdout and output files stay reproducible.

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

Level log_level() {
  static const Level level = [] {
    const char* env = std::getenv("VISTR_LOG");
    const std::string v = env ? env : "info";
    if (v == "error") return Level::Error;
    if (v == "warn") return Level::Warn;
    if (v == "debug") return Level::Debug;
    return Level::Info;
  }();
  return level;
}

void log(Level level, const std::string& msg) {
  static const char* names[] = {"error", "warn", "info", "debug"};
  if (level <= log_level()) std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Exit codes.

constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config:
    case ErrorKind::Parameter: return 2;
    case ErrorKind::File: return 3;
    case ErrorKind::Format: return 4;
    case ErrorKind::Integrity: return 5;
    case ErrorKind::Shape: return 6;
    case ErrorKind::Divergence: return 7;
    case ErrorKind::Data: return 8;
    case ErrorKind::Degenerate:
    case ErrorKind::InsufficientMatches:
    case ErrorKind::NoSubmap:
    case ErrorKind::EmptyMap: return 10;
    case ErrorKind::UndefinedMetric: return 11;
  }
  return kExitInternal;
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + '"';
}

int report_error(std::string_view kind, int code, const std::string& message) {
  std::cerr << "error kind=" << kind << " code=" << code << " message=" << quoted(message) << '\n';
  return code;
}

// ---------------------------------------------------------------------------
// Run configuration.

struct Paths {
  std::string bundle, queries, model, poses, train_log, text, text_queries, submap, report, cdf_t, cdf_r;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::uint32_t threads = std::max(1u, std::thread::hardware_concurrency());
  SyntheticSceneConfig scene;
  TrainConfig train;
  RetrievalConfig retrieval;
  std::optional<std::uint64_t> query_id;
  MatchConfig matching;
  RansacConfig ransac;
  double import_margin = 0.05;
  std::uint64_t bench_queries = 0;  // 0 = all
  Paths paths;

  // Distributes the shared seed and thread count into the stage configs.
  void finalise() {
    scene.seed = seed;
    train.seed = seed;
    train.threads = threads;
    retrieval.seed = seed;
    ransac.seed = seed;
    require(threads >= 1, ErrorKind::Config, "threads must be >= 1");
  }
};

// Reads keys from one JSON object, remembering which ones were consumed so
// leftovers can be rejected.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    require(j_.is_object(), ErrorKind::Config, "config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& dst) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string where = name_.empty() ? key : name_ + "." + key;
    if constexpr (std::is_same_v<T, std::string>) {
      require(it->is_string(), ErrorKind::Config, where + " must be a string");
    } else if constexpr (std::is_same_v<T, bool>) {
      require(it->is_boolean(), ErrorKind::Config, where + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      require(it->is_number_integer(), ErrorKind::Config, where + " must be an integer");
      if constexpr (std::is_unsigned_v<T>)
        require(it->is_number_unsigned() || it->template get<std::int64_t>() >= 0, ErrorKind::Config,
                where + " must be non-negative");
    } else {
      require(it->is_number(), ErrorKind::Config, where + " must be a number");
    }
    dst = it->template get<T>();
  }

  template <typename T>
  void get(const char* key, std::optional<T>& dst) {
    if (!j_.contains(key)) {
      seen_.insert(key);
      return;
    }
    T v{};
    get(key, v);
    dst = v;
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        fail(ErrorKind::Config, "unknown config key '" + (name_.empty() ? it.key() : name_ + "." + it.key()) + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void read_scene(Section s, SyntheticSceneConfig& c) {
  s.get("num_points", c.num_points);
  s.get("num_cameras", c.num_cameras);
  s.get("query_stride", c.query_stride);
  s.get("extent", c.extent);
  s.get("embedding_dim", c.embedding_dim);
  s.get("descriptor_dim", c.descriptor_dim);
  s.get("descriptor_noise", c.descriptor_noise);
  s.get("embedding_noise", c.embedding_noise);
  s.get("embedding_amplitude", c.embedding_amplitude);
  s.get("embedding_bandwidth", c.embedding_bandwidth);
  s.get("fov_deg", c.fov_deg);
  s.get("image_width", c.image_width);
  s.get("image_height", c.image_height);
  s.get("max_depth", c.max_depth);
  s.get("dropout", c.dropout);
  s.get("keypoint_noise_px", c.keypoint_noise_px);
  s.get("distractor_fraction", c.distractor_fraction);
  s.get("query_jitter", c.query_jitter);
  s.get("min_visible", c.min_visible);
  s.get("max_retries", c.max_retries);
  s.finish();
}

void read_train(Section s, TrainConfig& c) {
  s.get("iterations", c.iterations);
  s.get("batch_images", c.batch_images);
  s.get("points_per_image", c.points_per_image);
  s.get("mc_samples", c.mc_samples);
  s.get("max_lr", c.max_lr);
  s.get("warmup_fraction", c.warmup_fraction);
  s.get("div_factor", c.div_factor);
  s.get("final_div_factor", c.final_div_factor);
  s.get("adam_beta1", c.adam_beta1);
  s.get("adam_beta2", c.adam_beta2);
  s.get("adam_eps", c.adam_eps);
  s.get("latent_dim", c.latent_dim);
  s.get("hidden_width", c.hidden_width);
  s.get("hidden_layers", c.hidden_layers);
  s.get("lift_dim", c.lift_dim);
  s.get("kl_warmup_start", c.kl_warmup_start);
  s.get("kl_period", c.kl_period);
  s.get("beta_before_warmup", c.beta_before_warmup);
  s.get("embedding_noise_var", c.embedding_noise_var);
  s.get("sigma_init", c.sigma_init);
  s.get("chunk_pairs", c.chunk_pairs);
  s.get("log_every", c.log_every);
  s.finish();
}

void read_config_file(const std::string& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::File, "cannot open config: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, "config " + path + ": " + e.what());
  }
  Section root(j, "");
  root.get("seed", cfg.seed);
  root.get("threads", cfg.threads);
  if (const json* s = root.sub("scene")) read_scene(Section(*s, "scene"), cfg.scene);
  if (const json* s = root.sub("train")) read_train(Section(*s, "train"), cfg.train);
  if (const json* s = root.sub("retrieval")) {
    Section r(*s, "retrieval");
    r.get("samples", cfg.retrieval.samples);
    r.get("radius", cfg.retrieval.radius);
    r.get("voxel", cfg.retrieval.voxel);
    r.get("query_id", cfg.query_id);
    r.finish();
  }
  if (const json* s = root.sub("matching")) {
    Section m(*s, "matching");
    std::string mode = cfg.matching.mode == MatchMode::Ratio ? "ratio" : "mutual";
    m.get("mode", mode);
    require(mode == "mutual" || mode == "ratio", ErrorKind::Config, "matching.mode must be 'mutual' or 'ratio'");
    cfg.matching.mode = mode == "ratio" ? MatchMode::Ratio : MatchMode::MutualNearest;
    m.get("ratio", cfg.matching.ratio);
    m.finish();
  }
  if (const json* s = root.sub("ransac")) {
    Section r(*s, "ransac");
    r.get("threshold_px", cfg.ransac.threshold_px);
    r.get("max_iterations", cfg.ransac.max_iterations);
    r.get("confidence", cfg.ransac.confidence);
    r.get("min_matches", cfg.ransac.min_matches);
    r.get("refine_loss_px", cfg.ransac.refine_loss_px);
    r.finish();
  }
  if (const json* s = root.sub("import")) {
    Section r(*s, "import");
    r.get("margin", cfg.import_margin);
    r.finish();
  }
  if (const json* s = root.sub("bench")) {
    Section r(*s, "bench");
    r.get("queries", cfg.bench_queries);
    r.finish();
  }
  if (const json* s = root.sub("paths")) {
    Section p(*s, "paths");
    auto& d = cfg.paths;
    p.get("bundle", d.bundle);
    p.get("queries", d.queries);
    p.get("model", d.model);
    p.get("poses", d.poses);
    p.get("train_log", d.train_log);
    p.get("text", d.text);
    p.get("text_queries", d.text_queries);
    p.get("submap", d.submap);
    p.get("report", d.report);
    p.get("cdf_t", d.cdf_t);
    p.get("cdf_r", d.cdf_r);
    p.finish();
  }
  root.finish();
}

// Flag values; unset flags leave the file or default value alone.
struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed, query_id, iterations;
  std::optional<std::uint32_t> threads;
  std::optional<std::size_t> samples;
  std::optional<double> radius, voxel, margin;
  std::optional<std::string> bundle, queries, model, poses, train_log, text, text_queries, submap, report, cdf_t,
      cdf_r;
};

RunConfig resolve(const Flags& f) {
  RunConfig cfg;
  if (!f.config.empty()) read_config_file(f.config, cfg);
  auto set = [](auto& dst, const auto& src) {
    if (src) dst = *src;
  };
  set(cfg.seed, f.seed);
  set(cfg.threads, f.threads);
  if (f.query_id) cfg.query_id = f.query_id;
  set(cfg.train.iterations, f.iterations);
  set(cfg.retrieval.samples, f.samples);
  set(cfg.retrieval.radius, f.radius);
  set(cfg.retrieval.voxel, f.voxel);
  set(cfg.import_margin, f.margin);
  auto& p = cfg.paths;
  set(p.bundle, f.bundle);
  set(p.queries, f.queries);
  set(p.model, f.model);
  set(p.poses, f.poses);
  set(p.train_log, f.train_log);
  set(p.text, f.text);
  set(p.text_queries, f.text_queries);
  set(p.submap, f.submap);
  set(p.report, f.report);
  set(p.cdf_t, f.cdf_t);
  set(p.cdf_r, f.cdf_r);
  cfg.finalise();
  return cfg;
}

const std::string& need(const std::string& path, const char* what) {
  require(!path.empty(), ErrorKind::Config, std::string("missing path: ") + what);
  return path;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::File, "cannot write: " + path);
  return out;
}

SceneBundle load_bundle(const RunConfig& cfg) {
  SceneBundle b = load_scene_bundle(need(cfg.paths.bundle, "bundle (--bundle)"));
  log(Level::Info, "bundle: " + std::to_string(b.points.size()) + " points, " + std::to_string(b.images.size()) +
                       " images");
  return b;
}

Checkpoint load_checkpoint(const RunConfig& cfg, const SceneBundle& b) {
  Checkpoint ck = load_model(need(cfg.paths.model, "model (--model)"), b.embedding_dim);
  require(ck.model.norm() == b.norm, ErrorKind::Integrity,
          "checkpoint normalisation does not match the bundle (trained on a different scene?)");
  return ck;
}

QuerySet load_query_set(const RunConfig& cfg, const SceneBundle& b) {
  QuerySet qs = load_queries(need(cfg.paths.queries, "queries (--queries)"));
  require(qs.embedding_dim == b.embedding_dim && qs.descriptor_dim == b.descriptor_dim, ErrorKind::Shape,
          "query dimensions do not match the bundle");
  for (const auto& q : qs.queries) validate_query(q, qs, &b.camera(q.intrinsics_id));
  return qs;
}

std::vector<const QueryFeatures*> selected_queries(const RunConfig& cfg, const QuerySet& qs) {
  std::vector<const QueryFeatures*> out;
  if (cfg.query_id) {
    out.push_back(&qs.find(*cfg.query_id));
  } else {
    for (const auto& q : qs.queries) out.push_back(&q);
  }
  return out;
}

std::optional<RetrievalMetrics> retrieval_truth(const QueryFeatures& q, const Submap& s, std::size_t map_size) {
  if (!q.gt_visible_ids || q.gt_visible_ids->empty()) return std::nullopt;
  std::vector<std::uint64_t> vis = *q.gt_visible_ids;
  std::sort(vis.begin(), vis.end());
  vis.erase(std::unique(vis.begin(), vis.end()), vis.end());
  return retrieval_metrics(s.ids, vis, map_size);
}

// Runs `fn(i)` for i in [0, n) on `threads` threads; each index writes only
// its own slot, so the results do not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::uint32_t threads, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic) num_threads(static_cast<int>(threads)) if (threads > 1)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Subcommands.

int cmd_import(const RunConfig& cfg) {
  SceneBundle b = import_text_bundle(need(cfg.paths.text, "text bundle (--text)"), TextImportOptions{cfg.import_margin});
  save_scene_bundle(b, need(cfg.paths.bundle, "output bundle (--bundle)"));
  std::cout << "imported " << b.points.size() << " points, " << b.images.size() << " images -> " << cfg.paths.bundle
            << '\n';
  if (!cfg.paths.text_queries.empty()) {
    QuerySet qs = import_text_queries(cfg.paths.text_queries);
    require(qs.embedding_dim == b.embedding_dim && qs.descriptor_dim == b.descriptor_dim, ErrorKind::Shape,
            "query dimensions do not match the bundle");
    for (const auto& q : qs.queries) validate_query(q, qs, &b.camera(q.intrinsics_id));
    save_queries(qs, need(cfg.paths.queries, "output queries (--queries)"));
    std::cout << "imported " << qs.queries.size() << " queries -> " << cfg.paths.queries << '\n';
  }
  return 0;
}

int cmd_gen_scene(const RunConfig& cfg) {
  const SyntheticScene s = generate_synthetic_scene(cfg.scene);
  save_scene_bundle(s.bundle, need(cfg.paths.bundle, "output bundle (--bundle)"));
  save_queries(s.queries, need(cfg.paths.queries, "output queries (--queries)"));
  if (!cfg.paths.text.empty()) {
    auto out = open_out(cfg.paths.text);
    write_text_bundle(s.bundle, out);
  }
  if (!cfg.paths.text_queries.empty()) {
    auto out = open_out(cfg.paths.text_queries);
    write_text_queries(s.queries, out);
  }
  std::cout << "scene: " << s.bundle.points.size() << " points, " << s.bundle.images.size() << " mapping images, "
            << s.queries.queries.size() << " queries, extent " << cfg.scene.extent << " m\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  const SceneBundle b = load_bundle(cfg);
  need(cfg.paths.model, "output model (--model)");
  log(Level::Info, "training " + std::to_string(cfg.train.iterations) + " iterations on " +
                       std::to_string(cfg.threads) + " thread(s)");
  const TrainResult r = train(b, cfg.train, [](const TrainLogRecord& rec) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "iter %llu loss %.6f recon %.6f kl %.6f beta %.3f lr %.3e",
                  static_cast<unsigned long long>(rec.iter), rec.loss, rec.recon, rec.kl, rec.beta, rec.lr);
    log(Level::Info, buf);
  });
  if (!cfg.paths.train_log.empty()) {
    auto out = open_out(cfg.paths.train_log);
    write_train_log(out, r.log);
  }
  if (r.diverged) fail(ErrorKind::Divergence, "training diverged at " + r.divergence_reason);
  save_model(r.model, cfg.train, cfg.paths.model);
  const double first = r.log.empty() ? 0 : r.log.front().loss, last = r.log.empty() ? 0 : r.log.back().loss;
  std::cout << "trained " << r.loss_history.size() << " iterations, " << r.model.parameter_count()
            << " parameters; loss " << first << " -> " << last << '\n';
  return 0;
}

int cmd_retrieve(const RunConfig& cfg) {
  const SceneBundle b = load_bundle(cfg);
  const Checkpoint ck = load_checkpoint(cfg, b);
  const QuerySet qs = load_query_set(cfg, b);
  const auto selected = selected_queries(cfg, qs);
  const SpatialIndex index = build_spatial_index(b.positions());
  const auto& rc = cfg.retrieval;
  rc.validate();

  std::vector<GeneratedPointSet> generated(selected.size());
  std::vector<Submap> submaps(selected.size());
  parallel_for(selected.size(), cfg.threads, [&](std::size_t i) {
    generated[i] = sample_structure(ck.model, Vec<float>(selected[i]->embedding), rc.samples, rc.seed);
    submaps[i] = radius_retrieve(index, b, generated[i], rc.radius, rc.voxel);
  });

  std::cout << "samples=" << rc.samples << " radius=" << rc.radius << " voxel=" << rc.voxel << " seed=" << rc.seed
            << '\n';
  double rec = 0, prec = 0, red = 0;
  std::size_t n_truth = 0;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    std::cout << "query " << selected[i]->id << " submap=" << submaps[i].size();
    if (const auto m = retrieval_truth(*selected[i], submaps[i], b.points.size())) {
      std::cout << " recall=" << m->recall << " precision=" << m->precision << " reduction=" << m->reduction;
      rec += m->recall;
      prec += m->precision;
      red += m->reduction;
      ++n_truth;
    }
    std::cout << '\n';
  }
  if (n_truth > 0)
    std::cout << "mean recall=" << rec / n_truth << " precision=" << prec / n_truth << " reduction=" << red / n_truth
              << " over " << n_truth << " queries\n";

  if (!cfg.paths.submap.empty()) {
    auto out = open_out(cfg.paths.submap);
    out.precision(17);
    for (std::size_t i = 0; i < selected.size(); ++i) {
      out << "# query " << selected[i]->id << '\n';
      for (const auto& p : generated[i].points) out << "generated " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
      for (std::size_t k = 0; k < submaps[i].size(); ++k) {
        const auto& p = submaps[i].positions[k];
        out << "point " << submaps[i].ids[k] << ' ' << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
      }
    }
  }
  return 0;
}

json pose_record(const QueryFeatures& q, const LocalizeOutput& out, std::size_t map_size) {
  const auto& est = out.estimate;
  json r;
  r["id"] = q.id;
  r["success"] = est.success;
  if (est.success) {
    const auto& rot = est.pose.rotation;
    r["q"] = {rot.w(), rot.x(), rot.y(), rot.z()};
    r["t"] = {est.pose.translation.x(), est.pose.translation.y(), est.pose.translation.z()};
  } else {
    r["q"] = nullptr;
    r["t"] = nullptr;
  }
  r["submap"] = est.submap_size;
  r["matches"] = est.num_matches;
  r["inliers"] = est.inliers.size();
  r["iterations"] = est.num_iterations;
  r["reason"] = out.failure_reason;
  if (const auto m = retrieval_truth(q, out.submap, map_size))
    r["retrieval"] = {{"recall", m->recall}, {"precision", m->precision}, {"reduction", m->reduction}};
  return r;
}

int cmd_localize(const RunConfig& cfg) {
  const SceneBundle b = load_bundle(cfg);
  const Checkpoint ck = load_checkpoint(cfg, b);
  const QuerySet qs = load_query_set(cfg, b);
  const auto selected = selected_queries(cfg, qs);
  auto out = open_out(need(cfg.paths.poses, "output poses (--poses)"));
  const LocalizationMap map(b);

  std::vector<json> records(selected.size());
  parallel_for(selected.size(), cfg.threads, [&](std::size_t i) {
    const LocalizeOutput r = localize(map, ck.model, *selected[i], cfg.retrieval, cfg.matching, cfg.ransac);
    records[i] = pose_record(*selected[i], r, b.points.size());
  });
  std::size_t ok = 0;
  for (const auto& r : records) {
    out << r.dump() << '\n';
    ok += r["success"].get<bool>() ? 1 : 0;
  }
  std::cout << "localised " << ok << " / " << records.size() << " queries -> " << cfg.paths.poses << '\n';
  return 0;
}

std::vector<json> read_pose_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::File, "cannot open: " + path);
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
      const json& r = out.back();
      if (!r.at("id").is_number_unsigned() || !r.at("success").is_boolean()) throw std::runtime_error("bad field");
      if (r["success"].get<bool>() && (r.at("q").size() != 4 || r.at("t").size() != 3))
        throw std::runtime_error("bad pose");
    } catch (const std::exception& e) {
      fail(ErrorKind::Format, path + " line " + std::to_string(n) + ": malformed pose record");
    }
  }
  return out;
}

json report_json(const EvalReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j;
  j["queries"] = r.queries.size();
  j["localised"] = r.successes;
  j["median_t"] = num(r.median_t);
  j["median_r"] = num(r.median_r);
  for (std::size_t i = 0; i < r.recalls.size(); ++i)
    j["recall"].push_back({{"t", r.thresholds[i].t}, {"r", r.thresholds[i].r}, {"value", r.recalls[i]}});
  j["retrieval"] = {{"recall", num(r.mean_retrieval_recall)},
                    {"precision", num(r.mean_retrieval_precision)},
                    {"reduction", num(r.mean_reduction)}};
  for (const auto& q : r.queries)
    j["per_query"].push_back({{"id", q.id},
                              {"success", q.success},
                              {"t_err", q.success ? num(q.error.t_err) : json(nullptr)},
                              {"r_err", q.success ? num(q.error.r_err) : json(nullptr)}});
  return j;
}

int cmd_eval(const RunConfig& cfg) {
  const QuerySet qs = load_queries(need(cfg.paths.queries, "queries with ground truth (--queries)"));
  const auto records = read_pose_records(need(cfg.paths.poses, "pose records (--poses)"));
  std::vector<QueryOutcome> outcomes;
  std::set<std::uint64_t> seen;
  for (const auto& r : records) {
    QueryOutcome o;
    o.id = r["id"].get<std::uint64_t>();
    require(seen.insert(o.id).second, ErrorKind::Integrity, "duplicate pose record for query " + std::to_string(o.id));
    const QueryFeatures& q = qs.find(o.id);
    require(q.gt_pose.has_value(), ErrorKind::Integrity, "query " + std::to_string(o.id) + " has no ground-truth pose");
    o.success = r["success"].get<bool>();
    if (o.success) {
      const auto& qv = r["q"];
      const auto& tv = r["t"];
      Pose p;
      p.rotation = Eigen::Quaterniond(qv[0].get<double>(), qv[1].get<double>(), qv[2].get<double>(), qv[3].get<double>());
      p.translation = Point3(tv[0].get<double>(), tv[1].get<double>(), tv[2].get<double>());
      require(p.is_valid(), ErrorKind::Data, "invalid pose in record for query " + std::to_string(o.id));
      o.error = pose_errors(p, *q.gt_pose);
    }
    o.submap_size = r.value("submap", std::size_t{0});
    o.num_matches = r.value("matches", std::size_t{0});
    o.num_inliers = r.value("inliers", std::size_t{0});
    if (r.contains("retrieval")) {
      o.retrieval_recall = r["retrieval"]["recall"].get<double>();
      o.retrieval_precision = r["retrieval"]["precision"].get<double>();
      o.reduction = r["retrieval"]["reduction"].get<double>();
    }
    outcomes.push_back(o);
  }
  const EvalReport report = make_eval_report(std::move(outcomes));
  print_eval_report(std::cout, report);
  if (!cfg.paths.report.empty()) open_out(cfg.paths.report) << report_json(report).dump(2) << '\n';
  if (!cfg.paths.cdf_t.empty()) {
    auto out = open_out(cfg.paths.cdf_t);
    write_error_cdf(out, report.queries, false);
  }
  if (!cfg.paths.cdf_r.empty()) {
    auto out = open_out(cfg.paths.cdf_r);
    write_error_cdf(out, report.queries, true);
  }
  return 0;
}

// Wall-clock timings are measured, not computed, so the table is the one
// output that is not bit-reproducible. Queries run one at a time so each
// stage time is an uncontended single-query latency.
int cmd_bench(const RunConfig& cfg) {
  const SceneBundle b = load_bundle(cfg);
  const Checkpoint ck = load_checkpoint(cfg, b);
  const QuerySet qs = load_query_set(cfg, b);
  auto selected = selected_queries(cfg, qs);
  if (cfg.bench_queries > 0 && selected.size() > cfg.bench_queries) selected.resize(cfg.bench_queries);
  const LocalizationMap map(b);

  std::vector<StageTimings> timings;
  std::size_t ok = 0;
  for (const auto* q : selected) {
    const LocalizeOutput r = localize(map, ck.model, *q, cfg.retrieval, cfg.matching, cfg.ransac);
    timings.push_back(r.estimate.timings);
    ok += r.estimate.success ? 1 : 0;
  }
  require(!timings.empty(), ErrorKind::UndefinedMetric, "no queries to benchmark");
  const TimingReport t = timing_report(timings);
  std::cout << "map points: " << b.points.size() << "  samples: " << cfg.retrieval.samples
            << "  queries: " << selected.size() << "  localised: " << ok << '\n';
  print_timing_table(std::cout, t);
  char buf[96];
  std::snprintf(buf, sizeof buf, "decoder forward + tree lookup: %.3f ms\n",
                (t.mean.global_search_us + t.mean.tree_lookup_us) / 1000.0);
  std::cout << buf;
  StorageReport s = storage_report(ck.model, ck.config, b);
  s.checkpoint_bytes = std::filesystem::file_size(cfg.paths.model);
  print_storage_report(std::cout, s);
  return 0;
}

// ---------------------------------------------------------------------------

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("-c,--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "random seed [seed]");
  sub->add_option("--threads", f.threads, "parallelism degree [threads]");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vistr: relocalisation from a scene-specific generative structure model"};
  app.require_subcommand(1);
  Flags f;

  auto* imp = app.add_subcommand("import", "text bundle (and optional text queries) -> binary files");
  add_common(imp, f);
  imp->add_option("--text", f.text, "input text bundle [paths.text]");
  imp->add_option("--text-queries", f.text_queries, "input text queries [paths.text_queries]");
  imp->add_option("--bundle", f.bundle, "output bundle [paths.bundle]");
  imp->add_option("--queries", f.queries, "output queries [paths.queries]");
  imp->add_option("--margin", f.margin, "normalisation margin when the text has no norm record [import.margin]");

  auto* gen = app.add_subcommand("gen-scene", "synthetic bundle and queries");
  add_common(gen, f);
  gen->add_option("--bundle", f.bundle, "output bundle [paths.bundle]");
  gen->add_option("--queries", f.queries, "output queries [paths.queries]");
  gen->add_option("--text", f.text, "also write the bundle as text [paths.text]");
  gen->add_option("--text-queries", f.text_queries, "also write the queries as text [paths.text_queries]");

  auto* trn = app.add_subcommand("train", "train the scene model");
  add_common(trn, f);
  trn->add_option("--bundle", f.bundle, "scene bundle [paths.bundle]");
  trn->add_option("--model", f.model, "output checkpoint [paths.model]");
  trn->add_option("--train-log", f.train_log, "output loss log [paths.train_log]");
  trn->add_option("--iterations", f.iterations, "training iterations [train.iterations]");

  auto* ret = app.add_subcommand("retrieve", "sample structure and retrieve submaps");
  add_common(ret, f);
  ret->add_option("--bundle", f.bundle, "scene bundle [paths.bundle]");
  ret->add_option("--model", f.model, "checkpoint [paths.model]");
  ret->add_option("--queries", f.queries, "queries [paths.queries]");
  ret->add_option("--query-id", f.query_id, "single query (default: all) [retrieval.query_id]");
  ret->add_option("--samples", f.samples, "generated samples [retrieval.samples]");
  ret->add_option("--radius", f.radius, "retrieval radius in metres [retrieval.radius]");
  ret->add_option("--voxel", f.voxel, "voxel size in metres, 0 disables [retrieval.voxel]");
  ret->add_option("--submap", f.submap, "dump generated and retrieved points [paths.submap]");

  auto* loc = app.add_subcommand("localize", "estimate query poses");
  add_common(loc, f);
  loc->add_option("--bundle", f.bundle, "scene bundle [paths.bundle]");
  loc->add_option("--model", f.model, "checkpoint [paths.model]");
  loc->add_option("--queries", f.queries, "queries [paths.queries]");
  loc->add_option("--query-id", f.query_id, "single query (default: all) [retrieval.query_id]");
  loc->add_option("--samples", f.samples, "generated samples [retrieval.samples]");
  loc->add_option("--radius", f.radius, "retrieval radius in metres [retrieval.radius]");
  loc->add_option("--voxel", f.voxel, "voxel size in metres, 0 disables [retrieval.voxel]");
  loc->add_option("--poses", f.poses, "output pose records, JSON lines [paths.poses]");

  auto* ev = app.add_subcommand("eval", "score pose records against ground truth");
  add_common(ev, f);
  ev->add_option("--queries", f.queries, "queries with ground truth [paths.queries]");
  ev->add_option("--poses", f.poses, "pose records [paths.poses]");
  ev->add_option("--report", f.report, "output JSON report [paths.report]");
  ev->add_option("--cdf-t", f.cdf_t, "output translation-error CDF [paths.cdf_t]");
  ev->add_option("--cdf-r", f.cdf_r, "output rotation-error CDF [paths.cdf_r]");

  auto* ben = app.add_subcommand("bench", "per-stage latency and storage");
  add_common(ben, f);
  ben->add_option("--bundle", f.bundle, "scene bundle [paths.bundle]");
  ben->add_option("--model", f.model, "checkpoint [paths.model]");
  ben->add_option("--queries", f.queries, "queries [paths.queries]");
  ben->add_option("--query-id", f.query_id, "single query (default: all) [retrieval.query_id]");
  ben->add_option("--samples", f.samples, "generated samples [retrieval.samples]");
  ben->add_option("--radius", f.radius, "retrieval radius in metres [retrieval.radius]");
  ben->add_option("--voxel", f.voxel, "voxel size in metres, 0 disables [retrieval.voxel]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", kExitUsage, e.what());
  }

  try {
    const RunConfig cfg = resolve(f);
    if (imp->parsed()) return cmd_import(cfg);
    if (gen->parsed()) return cmd_gen_scene(cfg);
    if (trn->parsed()) return cmd_train(cfg);
    if (ret->parsed()) return cmd_retrieve(cfg);
    if (loc->parsed()) return cmd_localize(cfg);
    if (ev->parsed()) return cmd_eval(cfg);
    if (ben->parsed()) return cmd_bench(cfg);
  } catch (const Error& e) {
    return report_error(to_string(e.kind()), exit_code(e.kind()), e.what());
  } catch (const std::exception& e) {
    return report_error("internal", kExitInternal, e.what());
  }
  return kExitInternal;
}
