#pragma once

// Query ranking model. A query Q = (template T, parameters U) is scored as
// P(Q | R, L) = P1(T | R, L) * prod_i P2(u_i | b_i, T, L), where R is the user
// report and L the rank-ordered log vector. P1 is trained with NCE against
// sampled templates, P2 with a full softmax over kind-compatible subsystems.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qrank/common.hpp"
#include "qrank/dsl.hpp"
#include "qrank/faultlab.hpp"
#include "qrank/neural.hpp"
#include "qrank/telemetry.hpp"

namespace qrank::ranker {

using nlohmann::json;
using nn::Mat;
using nn::Vec;
using telemetry::SubsystemKind;
using faultlab::Scenario;

// ---------------------------------------------------------------------------
// Configuration

enum class AblationMode {
  None,
  ExcludeReport,
  NoRankOrder,
  Monolithic,
  Classifier,
  SingleTool,
  DropFeature,
};

struct Ablation {
  AblationMode mode = AblationMode::None;
  std::string arg;  // dialect for single-tool, metric for drop-feature

  std::string str() const {
    switch (mode) {
      case AblationMode::None: return "none";
      case AblationMode::ExcludeReport: return "exclude-report";
      case AblationMode::NoRankOrder: return "no-rank-order";
      case AblationMode::Monolithic: return "monolithic";
      case AblationMode::Classifier: return "classifier";
      case AblationMode::SingleTool: return "single-tool=" + arg;
      case AblationMode::DropFeature: return "drop-feature=" + arg;
    }
    return "none";
  }

  static Ablation parse(std::string_view s) {
    Ablation a;
    const auto eq = s.find('=');
    const std::string head(s.substr(0, eq));
    const std::string arg = eq == std::string_view::npos ? "" : std::string(s.substr(eq + 1));
    auto bad = [&] {
      return InvalidArgument("invalid_ablation", "unknown ablation '" + std::string(s) + "'");
    };
    if (head.empty() || head == "none") {
      a.mode = AblationMode::None;
    } else if (head == "exclude-report") {
      a.mode = AblationMode::ExcludeReport;
    } else if (head == "no-rank-order") {
      a.mode = AblationMode::NoRankOrder;
    } else if (head == "monolithic") {
      a.mode = AblationMode::Monolithic;
    } else if (head == "classifier") {
      a.mode = AblationMode::Classifier;
    } else if (head == "single-tool") {
      a.mode = AblationMode::SingleTool;
      try {
        a.arg = std::string(dsl::to_string(dsl::dialect_from_string(arg)));
      } catch (const Error&) {
        throw bad();
      }
    } else if (head == "drop-feature") {
      a.mode = AblationMode::DropFeature;
      try {
        telemetry::metric_index(arg);
      } catch (const Error&) {
        throw bad();
      }
      a.arg = arg;
    } else {
      throw bad();
    }
    if ((a.mode == AblationMode::SingleTool || a.mode == AblationMode::DropFeature) ==
        arg.empty())
      throw bad();
    return a;
  }
};

struct Hyper {
  std::size_t hidden = 300;
  int gcn_depth = 3;
  double lr = 1e-4;
  int epochs = 50;
  int patience = 10;
  std::size_t negatives = 2;
  std::size_t min_token_count = 2;
  std::uint64_t seed = 1;
  std::size_t beam = 5;
  std::size_t max_combinations = 10;
};

inline json to_json(const Hyper& h) {
  return json{{"hidden", h.hidden},   {"gcn_depth", h.gcn_depth},
              {"lr", h.lr},           {"epochs", h.epochs},
              {"patience", h.patience}, {"negatives", h.negatives},
              {"min_token_count", h.min_token_count}, {"seed", h.seed},
              {"beam", h.beam},       {"max_combinations", h.max_combinations}};
}

// Missing keys keep their defaults.
inline Hyper hyper_from_json(const json& j) {
  Hyper h;
  if (!j.is_object()) throw InvalidArgument("hyperparameters must be a JSON object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "hidden") h.hidden = v.get<std::size_t>();
      else if (k == "gcn_depth") h.gcn_depth = v.get<int>();
      else if (k == "lr") h.lr = v.get<double>();
      else if (k == "epochs") h.epochs = v.get<int>();
      else if (k == "patience") h.patience = v.get<int>();
      else if (k == "negatives") h.negatives = v.get<std::size_t>();
      else if (k == "min_token_count") h.min_token_count = v.get<std::size_t>();
      else if (k == "seed") h.seed = v.get<std::uint64_t>();
      else if (k == "beam") h.beam = v.get<std::size_t>();
      else if (k == "max_combinations") h.max_combinations = v.get<std::size_t>();
      else throw InvalidArgument("unknown hyperparameter '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed hyperparameters: " + std::string(e.what()));
  }
  if (h.hidden == 0 || h.gcn_depth < 1 || !(h.lr > 0) || h.epochs < 0 || h.patience < 1 ||
      h.negatives < 1 || h.beam < 1 || h.max_combinations < 1)
    throw InvalidArgument("hyperparameter out of range");
  return h;
}

// ---------------------------------------------------------------------------
// Template catalog

struct CatalogEntry {
  dsl::QueryTemplate tmpl;
  std::string text;
  nn::PreparedGraph graph;
};

struct Catalog {
  std::vector<CatalogEntry> entries;

  std::size_t size() const { return entries.size(); }
  std::optional<std::size_t> find(std::string_view text) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].text == text) return i;
    return std::nullopt;
  }
  void add(dsl::QueryTemplate t) {
    std::string text = dsl::render_template(t);
    if (find(text)) return;
    auto graph = nn::prepare_graph(dsl::ast_to_graph(t));
    entries.push_back({std::move(t), std::move(text), std::move(graph)});
  }
};

// Templates of the ground-truth queries, in order of first appearance.
inline Catalog build_catalog(const std::vector<const Scenario*>& training,
                             std::optional<dsl::Dialect> only = std::nullopt) {
  Catalog c;
  for (const auto* s : training) {
    auto [t, u] = dsl::extract_template(s->ground_truth());
    if (only && t.dialect != *only) continue;
    c.add(std::move(t));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Subsystem candidates

inline SubsystemKind kind_of(dsl::ParamKind p) {
  switch (p) {
    case dsl::ParamKind::Switch: return SubsystemKind::Switch;
    case dsl::ParamKind::Function: return SubsystemKind::Function;
    case dsl::ParamKind::Host: return SubsystemKind::Container;
    case dsl::ParamKind::None: break;
  }
  throw InvalidArgument("blank has no subsystem kind");
}

inline std::size_t kind_index(SubsystemKind k) { return static_cast<std::size_t>(k); }

inline std::size_t kind_feature_count(SubsystemKind k) {
  return telemetry::metrics_of(k).size() * telemetry::kStatistics.size();
}

// Candidate vectors use one block per kind, [features; ranks], so every kind
// shares one scoring network.
inline std::size_t candidate_block_offset(SubsystemKind k) {
  std::size_t off = 0;
  for (auto other : telemetry::kAllKinds) {
    if (other == k) return off;
    off += 2 * kind_feature_count(other);
  }
  return off;
}

inline std::size_t candidate_width() {
  std::size_t w = 0;
  for (auto k : telemetry::kAllKinds) w += 2 * kind_feature_count(k);
  return w;
}

inline std::string identity_key(SubsystemKind k, std::string_view id) {
  return std::string(telemetry::to_string(k)) + ":" + std::string(id);
}

// Identity of a subsystem as the answer to one blank of one template.
inline std::string slot_identity_key(std::string_view tmpl, std::size_t blank, std::string_view id) {
  return std::string(tmpl) + "#" + std::to_string(blank) + "#" + std::string(id);
}

struct Candidate {
  std::string id;
  Vec features;      // candidate_width()
  std::size_t identity = 0;  // index into Model::identities, 0 = unknown
};

struct Example {
  std::vector<int> tokens;
  Vec log;
  std::array<std::vector<Candidate>, 3> candidates;  // by kind, ascending id
  // Without rank ordering each blank only offers the identities it was
  // trained on: [template][blank].
  std::vector<std::vector<std::vector<Candidate>>> seen;

  bool has_truth = false;
  std::string truth_text;
  std::optional<std::size_t> truth_template;
  std::vector<std::string> truth_params;
};

struct KindNorm {
  std::vector<double> mean;
  std::vector<double> stdev;
};

// ---------------------------------------------------------------------------
// Ranked output

struct RankedQuery {
  std::string text;
  dsl::Dialect dialect = dsl::Dialect::Network;
  std::size_t template_index = 0;
  std::vector<std::string> params;
  double log_probability = 0;
  double probability = 0;
};

struct RankedPrediction {
  std::vector<RankedQuery> queries;
  std::size_t k = 0;
};

inline json to_json(const RankedQuery& q) {
  return json{{"query", q.text},
              {"dialect", dsl::to_string(q.dialect)},
              {"template", q.template_index},
              {"params", q.params},
              {"probability", q.probability}};
}

inline json to_json(const RankedPrediction& p) {
  json qs = json::array();
  for (std::size_t i = 0; i < p.queries.size(); ++i) {
    json q = to_json(p.queries[i]);
    q["rank"] = i + 1;
    qs.push_back(std::move(q));
  }
  return json{{"k", p.k}, {"queries", qs}};
}

// One line per query: rank, probability, query text.
inline std::string render_text(const RankedPrediction& p) {
  std::ostringstream os;
  for (std::size_t i = 0; i < p.queries.size(); ++i) {
    char prob[32];
    std::snprintf(prob, sizeof prob, "%.6f", p.queries[i].probability);
    os << (i + 1) << "  " << prob << "  " << p.queries[i].text << '\n';
  }
  return os.str();
}

namespace detail {

struct Scored {
  double logp = 0;
  std::size_t t = 0;
  std::vector<std::string> params;
};

inline bool params_less(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(),
                                      [](const std::string& x, const std::string& y) {
                                        return id_less(x, y);
                                      });
}

inline bool scored_before(const Scored& a, const Scored& b) {
  if (a.logp != b.logp) return a.logp > b.logp;
  if (a.t != b.t) return a.t < b.t;
  return params_less(a.params, b.params);
}

// Best-first enumeration of index tuples over per-blank lists sorted by
// descending log-probability; stops after `cap` tuples.
inline std::vector<std::pair<double, std::vector<std::size_t>>> best_combinations(
    const std::vector<std::vector<double>>& lists, std::size_t cap) {
  std::vector<std::pair<double, std::vector<std::size_t>>> out;
  for (const auto& l : lists)
    if (l.empty()) return out;
  using Item = std::pair<double, std::vector<std::size_t>>;
  auto worse = [](const Item& a, const Item& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second > b.second;
  };
  std::priority_queue<Item, std::vector<Item>, decltype(worse)> pq(worse);
  std::set<std::vector<std::size_t>> seen;
  auto score = [&](const std::vector<std::size_t>& idx) {
    double s = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) s += lists[i][idx[i]];
    return s;
  };
  std::vector<std::size_t> start(lists.size(), 0);
  pq.push({score(start), start});
  seen.insert(start);
  while (!pq.empty() && out.size() < cap) {
    Item top = pq.top();
    pq.pop();
    for (std::size_t i = 0; i < lists.size(); ++i) {
      if (top.second[i] + 1 >= lists[i].size()) continue;
      auto next = top.second;
      next[i] += 1;
      if (seen.insert(next).second) pq.push({score(next), next});
    }
    out.push_back(std::move(top));
  }
  return out;
}

inline Vec concat(std::initializer_list<const Vec*> parts) {
  Eigen::Index n = 0;
  for (const auto* p : parts) n += p->size();
  Vec out(n);
  Eigen::Index off = 0;
  for (const auto* p : parts) {
    out.segment(off, p->size()) = *p;
    off += p->size();
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model

class Model {
 public:
  Hyper hyper;
  Ablation ablation;
  Catalog catalog;
  telemetry::SlotCounts slots;
  std::vector<std::string> dropped_metrics;
  telemetry::LogLayout layout;
  telemetry::NormalizationStats log_norm;
  std::array<KindNorm, 3> cand_norm;
  std::vector<std::string> identities = {"<unknown>"};
  std::map<std::string, std::size_t> identity_index;
  bool trained = false;
  json history = json::object();

  nn::TextEncoder text;
  nn::GcnStack gcn;
  nn::Dense log_proj;
  nn::Mlp2 fuse;   // [v_R; v_L; v_T] -> v_S
  nn::Mlp2 head;   // [v_S; v_T] (+ e_U when monolithic) -> score
  nn::Mlp2 cls;    // classifier baseline: [v_R; v_L] -> template logits
  nn::Mlp2 p2;     // [v_b; candidate] -> score
  nn::Param id_emb;   // monolithic identity embeddings
  nn::Param id_bias;  // no-rank-order per-identity bias

  Model() = default;

  bool monolithic() const { return ablation.mode == AblationMode::Monolithic; }
  bool classifier() const { return ablation.mode == AblationMode::Classifier; }
  bool rank_order() const { return ablation.mode != AblationMode::NoRankOrder; }
  bool uses_report() const { return ablation.mode != AblationMode::ExcludeReport; }
  Eigen::Index h() const { return static_cast<Eigen::Index>(hyper.hidden); }

  void set_identities(std::vector<std::string> ids) {
    identities = {"<unknown>"};
    for (auto& id : ids)
      if (id != identities.front()) identities.push_back(std::move(id));
    identity_index.clear();
    for (std::size_t i = 0; i < identities.size(); ++i) identity_index[identities[i]] = i;
  }

  // Allocates every module for the current catalog, vocabulary and layout.
  void allocate() {
    const Eigen::Index H = h();
    gcn = nn::GcnStack(static_cast<Eigen::Index>(dsl::graph_feature_width()), H, hyper.gcn_depth);
    log_proj = nn::Dense("logproj", static_cast<Eigen::Index>(layout.width()), H);
    fuse = nn::Mlp2("fuse", 3 * H, H, H);
    head = nn::Mlp2("head", monolithic() ? 3 * H : 2 * H, H, 1);
    cls = nn::Mlp2("cls", 2 * H, H, std::max<Eigen::Index>(1, catalog.size()));
    p2 = nn::Mlp2("p2", H + static_cast<Eigen::Index>(candidate_width()), H, 1);
    const auto n_ids = static_cast<Eigen::Index>(identities.size());
    id_emb = nn::Param("id.E", monolithic() ? n_ids : 0, H);
    id_bias = nn::Param("id.bias", rank_order() ? 0 : n_ids, 1);
    if (text.vocab.empty()) text = nn::TextEncoder::from_vocab({}, H);
  }

  void init(Rng& rng) {
    text.init(rng);
    gcn.init(rng);
    log_proj.init(rng);
    fuse.init(rng);
    head.init(rng);
    cls.init(rng);
    p2.init(rng);
    nn::glorot_uniform(id_emb.value, rng, double(id_emb.value.rows()), double(h()));
    id_bias.value.setZero();
  }

  // Parameters updated by training; the GCN is shared by both factors.
  std::vector<nn::Param*> trainable_params() {
    std::vector<nn::Param*> out;
    auto add = [&](std::vector<nn::Param*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
    if (uses_report()) add(text.params());
    add(log_proj.params());
    add(gcn.params());
    if (classifier()) {
      add(cls.params());
    } else {
      add(fuse.params());
      add(head.params());
    }
    if (monolithic()) {
      out.push_back(&id_emb);
      return out;
    }
    add(p2.params());
    if (!rank_order()) out.push_back(&id_bias);
    return out;
  }

  // Every tensor, for serialization.
  std::vector<nn::Param*> all_params() {
    std::vector<nn::Param*> out = {&text.E};
    for (auto* p : gcn.params()) out.push_back(p);
    for (auto* p : log_proj.params()) out.push_back(p);
    for (auto* p : fuse.params()) out.push_back(p);
    for (auto* p : head.params()) out.push_back(p);
    for (auto* p : cls.params()) out.push_back(p);
    for (auto* p : p2.params()) out.push_back(p);
    out.push_back(&id_emb);
    out.push_back(&id_bias);
    return out;
  }

  // -------------------------------------------------------------------------
  // Inputs

  // Compresses candidate z-scores so an extreme reading (a saturated queue)
  // at an unseen location still lands where the scorer was trained.
  static double squash(double z) { return std::asinh(z); }

  static std::vector<std::string> report_tokens(const faultlab::UserReport& r) {
    auto tokens = nn::tokenize_text(r.text);
    for (const auto& [name, on] : r.choices)
      if (on) tokens.push_back("<" + name + ">");
    return tokens;
  }

  std::vector<double> candidate_vector(const telemetry::SubsystemFeatures& f) const {
    std::vector<double> v(candidate_width(), 0.0);
    const std::size_t off = candidate_block_offset(f.kind);
    const std::size_t n = f.features.size();
    const auto& norm = cand_norm[kind_index(f.kind)];
    const auto kind_metrics = telemetry::metrics_of(f.kind);
    for (std::size_t i = 0; i < n; ++i) {
      const auto metric = kind_metrics[i / telemetry::kStatistics.size()];
      const auto& name = telemetry::kMetrics[metric].name;
      if (std::find(dropped_metrics.begin(), dropped_metrics.end(), name) !=
          dropped_metrics.end())
        continue;
      if (!norm.mean.empty() && norm.stdev[i] > 0)
        v[off + i] = squash((f.features[i] - norm.mean[i]) / norm.stdev[i]);
      if (rank_order()) v[off + n + i] = f.shared_ranks[i];
    }
    return v;
  }

  Example prepare(const faultlab::UserReport& report,
                  const telemetry::TelemetryStore& logs) const {
    Example ex;
    ex.tokens = text.ids(report_tokens(report));
    const auto feats = telemetry::featurize(logs);
    const auto lv = telemetry::normalize(telemetry::build_log_vector(feats, layout), log_norm);
    ex.log = Eigen::Map<const Vec>(lv.values.data(), static_cast<Eigen::Index>(lv.values.size()));
    for (const auto& f : feats) {
      if (f.absent) continue;
      Candidate c;
      c.id = f.id;
      const auto v = candidate_vector(f);
      c.features = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
      if (monolithic()) {
        auto it = identity_index.find(identity_key(f.kind, f.id));
        c.identity = it == identity_index.end() ? 0 : it->second;
      }
      ex.candidates[kind_index(f.kind)].push_back(std::move(c));
    }
    for (auto& cs : ex.candidates)
      std::sort(cs.begin(), cs.end(),
                [](const Candidate& a, const Candidate& b) { return id_less(a.id, b.id); });
    if (!rank_order()) {
      ex.seen.resize(catalog.size());
      for (std::size_t t = 0; t < catalog.size(); ++t) {
        const auto& blanks = catalog.entries[t].tmpl.blanks;
        for (std::size_t b = 0; b < blanks.size(); ++b) {
          std::vector<Candidate> cs;
          for (const auto& c : ex.candidates[kind_index(kind_of(blanks[b]))]) {
            auto it = identity_index.find(slot_identity_key(catalog.entries[t].text, b, c.id));
            if (it == identity_index.end()) continue;
            cs.push_back(c);
            cs.back().identity = it->second;
          }
          ex.seen[t].push_back(std::move(cs));
        }
      }
    }
    return ex;
  }

  Example prepare(const Scenario& s) const {
    Example ex = prepare(s.report, s.logs);
    ex.has_truth = true;
    ex.truth_text = s.ground_truth_query;
    auto [t, u] = dsl::extract_template(s.ground_truth());
    ex.truth_template = catalog.find(dsl::render_template(t));
    ex.truth_params = u.values;
    return ex;
  }

  const std::vector<Candidate>& candidates_for(const Example& ex, std::size_t t,
                                               std::size_t blank) const {
    if (!rank_order()) return ex.seen.at(t).at(blank);
    return ex.candidates[kind_index(kind_of(catalog.entries.at(t).tmpl.blanks.at(blank)))];
  }

  std::optional<std::size_t> candidate_position(const Example& ex, std::size_t t,
                                                std::size_t blank, const std::string& id) const {
    const auto& cs = candidates_for(ex, t, blank);
    for (std::size_t i = 0; i < cs.size(); ++i)
      if (cs[i].id == id) return i;
    return std::nullopt;
  }

  // Ground truth is reachable: its template is in the catalog and every
  // parameter is among the candidates of its blank.
  bool expressible(const Example& ex) const {
    if (!ex.has_truth || !ex.truth_template) return false;
    const auto t = *ex.truth_template;
    if (catalog.entries[t].tmpl.blanks.size() != ex.truth_params.size()) return false;
    for (std::size_t b = 0; b < ex.truth_params.size(); ++b)
      if (!candidate_position(ex, t, b, ex.truth_params[b])) return false;
    return true;
  }

  // -------------------------------------------------------------------------
  // Cached graph encodings for inference (valid while the GCN is unchanged).

  std::vector<Vec> root_cache;
  std::vector<std::vector<Vec>> blank_cache;

  void refresh_caches() {
    root_cache.clear();
    blank_cache.clear();
    for (const auto& e : catalog.entries) {
      std::vector<std::size_t> rows = {e.graph.root};
      for (const auto& [b, node] : e.graph.blanks) rows.push_back(node);
      const Mat out = gcn.forward(e.graph, rows);
      root_cache.push_back(out.row(0).transpose());
      std::vector<Vec> bl;
      for (Eigen::Index r = 1; r < out.rows(); ++r) bl.push_back(out.row(r).transpose());
      blank_cache.push_back(std::move(bl));
    }
  }

  void check_ready() const {
    if (catalog.size() == 0) throw ModelError("template catalog is empty");
    if (root_cache.size() != catalog.size()) throw ModelError("model caches are stale");
  }

  Vec report_vector(const Example& ex) const {
    return uses_report() ? text.forward(ex.tokens) : Vec::Zero(h());
  }

  // -------------------------------------------------------------------------
  // P1

  double template_score(const Vec& vR, const Vec& vL, const Vec& vT) const {
    const Vec vS = fuse.forward(detail::concat({&vR, &vL, &vT}));
    return head.forward(detail::concat({&vS, &vT}))(0);
  }

  // Raw template scores S(T, R, L) over the catalog.
  Vec template_scores(const Example& ex) const {
    check_ready();
    const Vec vR = report_vector(ex);
    const Vec vL = log_proj.forward(ex.log);
    if (classifier()) return cls.forward(detail::concat({&vR, &vL}));
    Vec s(static_cast<Eigen::Index>(catalog.size()));
    for (std::size_t t = 0; t < catalog.size(); ++t)
      s(static_cast<Eigen::Index>(t)) = template_score(vR, vL, root_cache[t]);
    return s;
  }

  Vec template_probabilities(const Example& ex) const { return nn::softmax(template_scores(ex)); }

  // NCE loss of the positive template against the given negatives. With
  // backprop set, gradients accumulate into the template parameters.
  double p1_nce(const Example& ex, std::size_t pos, const std::vector<std::size_t>& negs,
                bool backprop) {
    const Vec vR = report_vector(ex);
    const Vec vL = log_proj.forward(ex.log);
    std::vector<std::size_t> ts = {pos};
    ts.insert(ts.end(), negs.begin(), negs.end());
    struct Tape {
      nn::GcnStack::Tape g;
      nn::Mlp2::Tape f, hd;
      Vec vT;
    };
    std::vector<Tape> tapes(ts.size());
    Vec scores(static_cast<Eigen::Index>(ts.size()));
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto& tp = tapes[i];
      const auto& g = catalog.entries.at(ts[i]).graph;
      tp.vT = gcn.forward(g, {g.root}, tp.g).row(0).transpose();
      const Vec vS = fuse.forward(detail::concat({&vR, &vL, &tp.vT}), tp.f);
      scores(static_cast<Eigen::Index>(i)) = head.forward(detail::concat({&vS, &tp.vT}), tp.hd)(0);
    }
    const auto lg = nn::nce_loss(scores(0), scores.tail(scores.size() - 1));
    if (!backprop) return lg.loss;
    const Eigen::Index H = h();
    Vec dR = Vec::Zero(H), dL = Vec::Zero(H);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto& tp = tapes[i];
      const Vec d2 = head.backward(tp.hd, Vec::Constant(1, lg.grad(static_cast<Eigen::Index>(i))));
      const Vec d1 = fuse.backward(tp.f, d2.head(H));
      dR += d1.head(H);
      dL += d1.segment(H, H);
      const Vec dT = d2.tail(H) + d1.tail(H);
      gcn.backward(tp.g, Mat(dT.transpose()));
    }
    if (uses_report()) text.backward(ex.tokens, dR);
    log_proj.backward(ex.log, dL);
    return lg.loss;
  }

  // Classifier baseline: cross-entropy over template labels.
  double classifier_ce(const Example& ex, std::size_t target, bool backprop) {
    const Vec vR = report_vector(ex);
    const Vec vL = log_proj.forward(ex.log);
    nn::Mlp2::Tape tp;
    const Vec logits = cls.forward(detail::concat({&vR, &vL}), tp);
    const auto lg = nn::cross_entropy(logits, static_cast<Eigen::Index>(target));
    if (!backprop) return lg.loss;
    const Vec d = cls.backward(tp, lg.grad);
    if (uses_report()) text.backward(ex.tokens, d.head(h()));
    log_proj.backward(ex.log, d.tail(h()));
    return lg.loss;
  }

  // -------------------------------------------------------------------------
  // P2

  Mat candidate_inputs(const Vec& vb, const std::vector<Candidate>& cs) const {
    const auto H = h();
    Mat X(static_cast<Eigen::Index>(cs.size()), H + static_cast<Eigen::Index>(candidate_width()));
    for (std::size_t i = 0; i < cs.size(); ++i) {
      X.row(static_cast<Eigen::Index>(i)).head(H) = vb.transpose();
      X.row(static_cast<Eigen::Index>(i)).tail(static_cast<Eigen::Index>(candidate_width())) =
          cs[i].features.transpose();
    }
    return X;
  }

  Vec parameter_scores_from(const Vec& vb, const std::vector<Candidate>& cs,
                            nn::Mlp2::RowTape* tape = nullptr) const {
    nn::Mlp2::RowTape local;
    Vec s = p2.forward_rows(candidate_inputs(vb, cs), tape ? *tape : local).col(0);
    if (!rank_order())
      for (std::size_t i = 0; i < cs.size(); ++i)
        s(static_cast<Eigen::Index>(i)) += id_bias.value(static_cast<Eigen::Index>(cs[i].identity), 0);
    return s;
  }

  // Raw scores S(u, b, T, L) for the candidates of blank `blank` (0-based).
  Vec parameter_scores(const Example& ex, std::size_t t, std::size_t blank) const {
    check_ready();
    const auto& cs = candidates_for(ex, t, blank);
    if (cs.empty()) throw ModelError("no candidate subsystems for blank");
    return parameter_scores_from(blank_cache.at(t).at(blank), cs);
  }

  Vec parameter_probabilities(const Example& ex, std::size_t t, std::size_t blank) const {
    return nn::softmax(parameter_scores(ex, t, blank));
  }

  // Summed cross-entropy over the ground-truth template's blanks. Blank
  // vectors are recomputed through the GCN so its gradient is exact.
  double p2_ce(const Example& ex, bool backprop) {
    if (!expressible(ex)) throw InvalidArgument("ground truth not expressible");
    const std::size_t t = *ex.truth_template;
    const auto& entry = catalog.entries[t];
    double total = 0;
    std::size_t b = 0;
    for (const auto& [bno, node] : entry.graph.blanks) {
      const auto& cs = candidates_for(ex, t, b);
      const auto target = *candidate_position(ex, t, b, ex.truth_params[b]);
      nn::GcnStack::Tape gt;
      const Vec vb = gcn.forward(entry.graph, {node}, gt).row(0).transpose();
      nn::Mlp2::RowTape rt;
      const Vec s = parameter_scores_from(vb, cs, &rt);
      const auto lg = nn::cross_entropy(s, static_cast<Eigen::Index>(target));
      total += lg.loss;
      if (backprop) {
        const Mat dX = p2.backward_rows(rt, Mat(lg.grad));
        if (!rank_order())
          for (std::size_t i = 0; i < cs.size(); ++i)
            id_bias.grad(static_cast<Eigen::Index>(cs[i].identity), 0) +=
                lg.grad(static_cast<Eigen::Index>(i));
        gcn.backward(gt, Mat(dX.leftCols(h()).colwise().sum()));
      }
      ++b;
    }
    return total;
  }

  // -------------------------------------------------------------------------
  // Monolithic baseline: one score per fully formed (T, U).

  Vec identity_vector(const Example& ex, std::size_t t, const std::vector<std::string>& params,
                      std::vector<std::size_t>* rows = nullptr) const {
    Vec e = Vec::Zero(h());
    if (params.empty()) return e;
    for (std::size_t b = 0; b < params.size(); ++b) {
      const auto& cs = candidates_for(ex, t, b);
      std::size_t row = 0;
      for (const auto& c : cs)
        if (c.id == params[b]) row = c.identity;
      e += id_emb.value.row(static_cast<Eigen::Index>(row)).transpose();
      if (rows) rows->push_back(row);
    }
    return e / static_cast<double>(params.size());
  }

  double monolithic_score(const Vec& vR, const Vec& vL, const Vec& vT, const Vec& eU) const {
    const Vec vS = fuse.forward(detail::concat({&vR, &vL, &vT}));
    return head.forward(detail::concat({&vS, &vT, &eU}))(0);
  }

  // Every (template, parameters) pair over the example's candidates.
  std::vector<detail::Scored> full_space(const Example& ex) const {
    std::vector<detail::Scored> out;
    for (std::size_t t = 0; t < catalog.size(); ++t) {
      const auto& blanks = catalog.entries[t].tmpl.blanks;
      std::vector<std::vector<double>> lists;
      for (std::size_t b = 0; b < blanks.size(); ++b)
        lists.emplace_back(candidates_for(ex, t, b).size(), 0.0);
      std::size_t total = 1;
      for (const auto& l : lists) total *= l.size();
      for (auto& [s, idx] : detail::best_combinations(lists, total)) {
        detail::Scored q;
        q.t = t;
        for (std::size_t b = 0; b < idx.size(); ++b)
          q.params.push_back(candidates_for(ex, t, b)[idx[b]].id);
        out.push_back(std::move(q));
      }
    }
    return out;
  }

  double monolithic_nce(const Example& ex, const detail::Scored& pos,
                        const std::vector<detail::Scored>& negs, bool backprop) {
    const Vec vR = report_vector(ex);
    const Vec vL = log_proj.forward(ex.log);
    std::vector<const detail::Scored*> qs = {&pos};
    for (const auto& n : negs) qs.push_back(&n);
    struct Tape {
      nn::GcnStack::Tape g;
      nn::Mlp2::Tape f, hd;
      Vec vT;
      std::vector<std::size_t> rows;
    };
    std::vector<Tape> tapes(qs.size());
    Vec scores(static_cast<Eigen::Index>(qs.size()));
    for (std::size_t i = 0; i < qs.size(); ++i) {
      auto& tp = tapes[i];
      const auto& g = catalog.entries.at(qs[i]->t).graph;
      tp.vT = gcn.forward(g, {g.root}, tp.g).row(0).transpose();
      const Vec eU = identity_vector(ex, qs[i]->t, qs[i]->params, &tp.rows);
      const Vec vS = fuse.forward(detail::concat({&vR, &vL, &tp.vT}), tp.f);
      scores(static_cast<Eigen::Index>(i)) =
          head.forward(detail::concat({&vS, &tp.vT, &eU}), tp.hd)(0);
    }
    const auto lg = nn::nce_loss(scores(0), scores.tail(scores.size() - 1));
    if (!backprop) return lg.loss;
    const Eigen::Index H = h();
    Vec dR = Vec::Zero(H), dL = Vec::Zero(H);
    for (std::size_t i = 0; i < qs.size(); ++i) {
      auto& tp = tapes[i];
      const Vec d2 = head.backward(tp.hd, Vec::Constant(1, lg.grad(static_cast<Eigen::Index>(i))));
      const Vec d1 = fuse.backward(tp.f, d2.head(H));
      dR += d1.head(H);
      dL += d1.segment(H, H);
      gcn.backward(tp.g, Mat((d2.segment(H, H) + d1.tail(H)).transpose()));
      if (!tp.rows.empty()) {
        const Vec dE = d2.tail(H) / static_cast<double>(tp.rows.size());
        for (auto r : tp.rows) id_emb.grad.row(static_cast<Eigen::Index>(r)) += dE.transpose();
      }
    }
    if (uses_report()) text.backward(ex.tokens, dR);
    log_proj.backward(ex.log, dL);
    return lg.loss;
  }

  // -------------------------------------------------------------------------
  // Ranking

  // Ranked (T, U) list. Factorized models keep the top `beam` templates and
  // up to `max_combinations` parameter tuples per template unless `full`.
  std::vector<detail::Scored> ranked(const Example& ex, bool full) const {
    check_ready();
    std::vector<detail::Scored> out;
    if (monolithic()) {
      out = full_space(ex);
      if (out.empty()) return out;
      const Vec vR = report_vector(ex);
      const Vec vL = log_proj.forward(ex.log);
      Vec s(static_cast<Eigen::Index>(out.size()));
      for (std::size_t i = 0; i < out.size(); ++i)
        s(static_cast<Eigen::Index>(i)) = monolithic_score(
            vR, vL, root_cache[out[i].t], identity_vector(ex, out[i].t, out[i].params));
      const Vec lp = nn::log_softmax(s);
      for (std::size_t i = 0; i < out.size(); ++i) out[i].logp = lp(static_cast<Eigen::Index>(i));
      std::sort(out.begin(), out.end(), detail::scored_before);
      return out;
    }
    const Vec lp1 = nn::log_softmax(template_scores(ex));
    std::vector<std::size_t> order(catalog.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return lp1(static_cast<Eigen::Index>(a)) > lp1(static_cast<Eigen::Index>(b));
    });
    if (!full && order.size() > hyper.beam) order.resize(hyper.beam);
    for (std::size_t t : order) {
      const auto& blanks = catalog.entries[t].tmpl.blanks;
      std::vector<std::vector<double>> lists;
      std::vector<std::vector<std::string>> ids;
      bool empty = false;
      for (std::size_t b = 0; b < blanks.size(); ++b) {
        const auto& cs = candidates_for(ex, t, b);
        if (cs.empty()) {
          empty = true;
          break;
        }
        const Vec lp2 = nn::log_softmax(parameter_scores(ex, t, b));
        std::vector<std::size_t> idx(cs.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t c) {
          return lp2(static_cast<Eigen::Index>(a)) > lp2(static_cast<Eigen::Index>(c));
        });
        std::vector<double> l;
        std::vector<std::string> names;
        for (auto i : idx) {
          l.push_back(lp2(static_cast<Eigen::Index>(i)));
          names.push_back(cs[i].id);
        }
        lists.push_back(std::move(l));
        ids.push_back(std::move(names));
      }
      if (empty) continue;
      std::size_t cap = 1;
      for (const auto& l : lists) cap *= l.size();
      if (!full) cap = std::min(cap, hyper.max_combinations);
      for (auto& [s, idx] : detail::best_combinations(lists, cap)) {
        detail::Scored q;
        q.t = t;
        q.logp = lp1(static_cast<Eigen::Index>(t)) + s;
        for (std::size_t b = 0; b < idx.size(); ++b) q.params.push_back(ids[b][idx[b]]);
        out.push_back(std::move(q));
      }
    }
    std::sort(out.begin(), out.end(), detail::scored_before);
    return out;
  }

  RankedQuery materialize(const detail::Scored& s) const {
    RankedQuery q;
    const auto& entry = catalog.entries.at(s.t);
    q.text = dsl::render_query(dsl::fill_blanks(entry.tmpl, dsl::ParamAssignment{s.params}));
    q.dialect = entry.tmpl.dialect;
    q.template_index = s.t;
    q.params = s.params;
    q.log_probability = s.logp;
    q.probability = std::exp(s.logp);
    return q;
  }

  RankedPrediction predict(const Example& ex, std::size_t k) const {
    if (!trained) throw ModelError("model is not trained");
    if (k == 0) throw InvalidArgument("k must be positive");
    RankedPrediction p;
    p.k = k;
    const auto list = ranked(ex, false);
    for (std::size_t i = 0; i < list.size() && i < k; ++i) p.queries.push_back(materialize(list[i]));
    return p;
  }

  // 1-based rank of the ground truth in the full ranking; nullopt when it
  // cannot be expressed.
  std::optional<std::size_t> rank_of(const Example& ex) const {
    if (!expressible(ex)) return std::nullopt;
    const auto list = ranked(ex, true);
    for (std::size_t i = 0; i < list.size(); ++i)
      if (list[i].t == *ex.truth_template && list[i].params == ex.truth_params) return i + 1;
    return std::nullopt;
  }
};

// ---------------------------------------------------------------------------
// Evaluation

struct SplitMetrics {
  std::size_t n = 0;
  std::size_t unexpressible = 0;
  std::optional<double> avg_rank;
  std::array<double, 5> topk{};
  std::vector<std::optional<std::size_t>> ranks;
};

inline SplitMetrics summarize_ranks(const std::vector<std::optional<std::size_t>>& ranks) {
  SplitMetrics m;
  m.ranks = ranks;
  m.n = ranks.size();
  double sum = 0;
  std::size_t expressed = 0;
  for (const auto& r : ranks) {
    if (!r) {
      ++m.unexpressible;
      continue;
    }
    sum += double(*r);
    ++expressed;
    for (std::size_t k = 1; k <= 5; ++k)
      if (*r <= k) m.topk[k - 1] += 1;
  }
  if (expressed > 0) m.avg_rank = sum / double(expressed);
  if (m.n > 0)
    for (auto& v : m.topk) v /= double(m.n);
  return m;
}

inline json to_json(const SplitMetrics& m) {
  json j{{"n", m.n}, {"unexpressible", m.unexpressible}};
  j["avg_rank"] = m.avg_rank ? json(*m.avg_rank) : json(nullptr);
  for (std::size_t k = 1; k <= 5; ++k) j["top" + std::to_string(k)] = m.topk[k - 1];
  j["na"] = m.n > 0 && m.unexpressible == m.n;
  return j;
}

inline SplitMetrics evaluate(const Model& model, const std::vector<const Scenario*>& scenarios) {
  std::vector<std::optional<std::size_t>> ranks;
  ranks.reserve(scenarios.size());
  for (const auto* s : scenarios) ranks.push_back(model.rank_of(model.prepare(*s)));
  return summarize_ranks(ranks);
}

inline json evaluate_splits(const Model& model, const faultlab::Dataset& ds,
                            const std::vector<faultlab::Split>& splits) {
  json out = json::object();
  for (auto s : splits) out[std::string(faultlab::to_string(s))] = to_json(evaluate(model, ds.split(s)));
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  Hyper hyper;
  Ablation ablation;
  std::function<void(const std::string&)> progress;
};

namespace detail {

struct ValScore {
  double rank = 0;
  double nll = 0;
  bool better_than(const ValScore& o) const {
    if (std::abs(rank - o.rank) > 1e-12) return rank < o.rank;
    return nll < o.nll;
  }
};

// Epoch loop with Adam, per-epoch shuffling and early stopping on the
// validation score. Restores the best parameters and returns the history.
inline json run_epochs(const std::vector<nn::Param*>& params, const Hyper& hyper, Rng& rng,
                       std::size_t n_train, const std::function<double(std::size_t)>& step,
                       const std::function<ValScore()>& validate,
                       const std::function<void(const std::string&)>& progress,
                       const std::string& label) {
  nn::AdamState adam;
  adam.lr = hyper.lr;
  json hist = json::array();
  std::optional<ValScore> best;
  std::vector<Mat> snapshot;
  int best_epoch = 0;
  int since = 0;
  std::vector<std::size_t> order(n_train);
  for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
  nn::zero_grads(params);
  for (int epoch = 1; epoch <= hyper.epochs && n_train > 0; ++epoch) {
    shuffle(order, rng);
    double loss = 0;
    for (std::size_t i : order) {
      loss += step(i);
      adam.step_params(params);  // also clears the gradients
    }
    loss /= double(n_train);
    const ValScore v = validate();
    hist.push_back({{"epoch", epoch}, {"train_loss", loss}, {"val_rank", v.rank}, {"val_nll", v.nll}});
    if (progress) {
      std::ostringstream os;
      os << label << " epoch " << epoch << " loss " << loss << " val_rank " << v.rank
         << " val_nll " << v.nll;
      progress(os.str());
    }
    if (!best || v.better_than(*best)) {
      best = v;
      best_epoch = epoch;
      since = 0;
      snapshot.clear();
      for (auto* p : params) snapshot.push_back(p->value);
    } else if (++since >= hyper.patience) {
      break;
    }
  }
  if (!snapshot.empty())
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = snapshot[i];
  return json{{"epochs", hist}, {"best_epoch", best_epoch}};
}

// k indices drawn uniformly with replacement from [0, n) minus `pos`.
inline std::vector<std::size_t> sample_negatives(std::size_t n, std::size_t pos, std::size_t k,
                                                 Rng& rng) {
  if (n < 2 || pos >= n) throw InvalidArgument("no negatives to sample");
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t i = uniform_index(rng, n - 1);
    out.push_back(i < pos ? i : i + 1);
  }
  return out;
}

}  // namespace detail

// Builds the catalog, layout, normalization and vocabulary from the training
// split and allocates an initialized, untrained model.
inline Model build_model(const faultlab::Dataset& ds, const Hyper& hyper, const Ablation& ablation) {
  Model m;
  m.hyper = hyper;
  m.ablation = ablation;
  const auto train = ds.split(faultlab::Split::Train);
  if (train.empty()) throw InvalidArgument("dataset has no training scenarios");

  std::optional<dsl::Dialect> only;
  if (ablation.mode == AblationMode::SingleTool) only = dsl::dialect_from_string(ablation.arg);
  m.catalog = build_catalog(train, only);
  if (m.catalog.size() == 0) throw InvalidArgument("no training ground truth fits the catalog");

  if (ablation.mode == AblationMode::DropFeature) m.dropped_metrics = {ablation.arg};
  if (only) {
    const auto keep = kind_of(dsl::subsystem_kind(*only));
    for (const auto& md : telemetry::kMetrics)
      if (md.kind != keep) m.dropped_metrics.emplace_back(md.name);
  }

  std::vector<std::vector<telemetry::SubsystemFeatures>> feats;
  for (const auto* s : train) {
    feats.push_back(telemetry::featurize(s->logs));
    m.slots.switches = std::max(m.slots.switches, s->logs.switches.size());
    m.slots.functions = std::max(m.slots.functions, s->logs.functions.size());
    m.slots.containers = std::max(m.slots.containers, s->logs.containers.size());
  }
  m.layout = telemetry::make_layout(m.slots, m.dropped_metrics, m.rank_order());
  std::vector<telemetry::LogVector> lvs;
  for (const auto& f : feats) lvs.push_back(telemetry::build_log_vector(f, m.layout));
  m.log_norm = telemetry::compute_normalization(lvs);

  for (auto k : telemetry::kAllKinds) {
    auto& norm = m.cand_norm[kind_index(k)];
    const std::size_t n = kind_feature_count(k);
    norm.mean.assign(n, 0.0);
    norm.stdev.assign(n, 0.0);
    double count = 0;
    for (const auto& fs : feats)
      for (const auto& f : fs)
        if (f.kind == k && !f.absent) {
          for (std::size_t i = 0; i < n; ++i) norm.mean[i] += f.features[i];
          count += 1;
        }
    if (count == 0) continue;
    for (auto& v : norm.mean) v /= count;
    for (const auto& fs : feats)
      for (const auto& f : fs)
        if (f.kind == k && !f.absent)
          for (std::size_t i = 0; i < n; ++i)
            norm.stdev[i] += (f.features[i] - norm.mean[i]) * (f.features[i] - norm.mean[i]);
    for (auto& v : norm.stdev) v = std::sqrt(v / count);
  }

  std::set<std::string> ids;
  if (m.monolithic()) {
    for (const auto& fs : feats)
      for (const auto& f : fs) ids.insert(identity_key(f.kind, f.id));
  } else if (!m.rank_order()) {
    for (const auto* s : train) {
      auto [t, u] = dsl::extract_template(s->ground_truth());
      const std::string text = dsl::render_template(t);
      if (!m.catalog.find(text)) continue;
      for (std::size_t b = 0; b < t.blanks.size(); ++b)
        ids.insert(slot_identity_key(text, b, u.values[b]));
    }
  }
  m.set_identities({ids.begin(), ids.end()});

  std::vector<std::vector<std::string>> docs;
  for (const auto* s : train) docs.push_back(Model::report_tokens(s->report));
  m.text = nn::TextEncoder::build(docs, static_cast<Eigen::Index>(hyper.hidden),
                                  hyper.min_token_count);
  m.allocate();
  Rng rng(derive_seed(hyper.seed, "init"));
  m.init(rng);
  m.refresh_caches();
  return m;
}

// One training step's loss for a ground-truth example. Gradients accumulate
// into the model; negatives are drawn from rng.
inline double training_step(Model& m, const Example& ex, Rng& rng) {
  const Hyper& hp = m.hyper;
  if (m.monolithic()) {
    auto space = m.full_space(ex);
    detail::Scored pos;
    pos.t = *ex.truth_template;
    pos.params = ex.truth_params;
    std::optional<std::size_t> at;
    for (std::size_t i = 0; i < space.size(); ++i)
      if (space[i].t == pos.t && space[i].params == pos.params) at = i;
    if (!at || space.size() < 2) return 0.0;
    std::vector<detail::Scored> negs;
    for (auto i : detail::sample_negatives(space.size(), *at, hp.negatives, rng))
      negs.push_back(space[i]);
    return m.monolithic_nce(ex, pos, negs, true);
  }
  const std::size_t pos = *ex.truth_template;
  double loss = 0;
  if (m.classifier()) {
    loss += m.classifier_ce(ex, pos, true);
  } else {
    if (m.catalog.size() > 1)
      loss += m.p1_nce(ex, pos, detail::sample_negatives(m.catalog.size(), pos, hp.negatives, rng),
                       true);
  }
  loss += m.p2_ce(ex, true);
  return loss;
}

// Mean 1-based rank and mean negative log-probability of the ground truth
// over the full ranking.
inline detail::ValScore validation_score(const Model& m, const std::vector<Example>& val) {
  detail::ValScore v;
  for (const auto& ex : val) {
    const auto list = m.ranked(ex, true);
    for (std::size_t i = 0; i < list.size(); ++i)
      if (list[i].t == *ex.truth_template && list[i].params == ex.truth_params) {
        v.rank += double(i + 1);
        v.nll -= list[i].logp;
        break;
      }
  }
  if (!val.empty()) {
    v.rank /= double(val.size());
    v.nll /= double(val.size());
  }
  return v;
}

// Trains both factors jointly (they share the GCN), keeping the epoch with
// the best validation rank.
inline Model train_model(const faultlab::Dataset& ds, const TrainOptions& opt) {
  Model m = build_model(ds, opt.hyper, opt.ablation);
  std::vector<Example> train, val;
  for (const auto* s : ds.split(faultlab::Split::Train)) {
    auto ex = m.prepare(*s);
    if (m.expressible(ex)) train.push_back(std::move(ex));
  }
  for (const auto* s : ds.split(faultlab::Split::Val)) {
    auto ex = m.prepare(*s);
    if (m.expressible(ex)) val.push_back(std::move(ex));
  }
  if (train.empty()) throw InvalidArgument("no expressible training scenarios");

  Rng rng(derive_seed(opt.hyper.seed, "train"));
  auto step = [&](std::size_t i) { return training_step(m, train[i], rng); };
  auto validate = [&] {
    m.refresh_caches();
    return validation_score(m, val);
  };
  json history = detail::run_epochs(m.trainable_params(), opt.hyper, rng, train.size(), step,
                                    validate, opt.progress, m.ablation.str());
  history["train_examples"] = train.size();
  history["val_examples"] = val.size();
  m.refresh_caches();
  m.trained = true;
  m.history = std::move(history);
  return m;
}

// ---------------------------------------------------------------------------
// Bundle I/O: "QRKB", u32 version, u64 metadata length, metadata JSON,
// u32 tensor count, then per tensor: u32 name length, name, u32 rank,
// u64 dims, little-endian float64 data in row-major order.

inline constexpr std::uint32_t kBundleVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "bundle I/O assumes little-endian");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

struct Reader {
  std::string_view data;
  std::size_t pos = 0;
  template <typename T>
  T get() {
    if (pos + sizeof(T) > data.size()) throw ModelError("bundle is truncated");
    T v;
    std::memcpy(&v, data.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    if (pos + n > data.size()) throw ModelError("bundle is truncated");
    auto s = data.substr(pos, n);
    pos += n;
    return s;
  }
};

inline json kind_norm_json(const KindNorm& n) { return json{{"mean", n.mean}, {"stdev", n.stdev}}; }

}  // namespace detail

inline json bundle_metadata(const Model& m) {
  json cat = json::array();
  for (const auto& e : m.catalog.entries)
    cat.push_back({{"template", e.text}, {"dialect", dsl::to_string(e.tmpl.dialect)}});
  json norms = json::object();
  for (auto k : telemetry::kAllKinds)
    norms[std::string(telemetry::to_string(k))] = detail::kind_norm_json(m.cand_norm[kind_index(k)]);
  return json{{"format", "qrank-bundle"},
              {"hyper", to_json(m.hyper)},
              {"ablation", m.ablation.str()},
              {"catalog", cat},
              {"slots", {{"switches", m.slots.switches}, {"functions", m.slots.functions},
                         {"containers", m.slots.containers}}},
              {"dropped_metrics", m.dropped_metrics},
              {"log_norm", {{"mean", m.log_norm.mean}, {"stdev", m.log_norm.stdev}}},
              {"candidate_norm", norms},
              {"vocab", m.text.vocab},
              {"identities", m.identities},
              {"trained", m.trained},
              {"history", m.history}};
}

inline std::string bundle_bytes(Model& m) {
  std::string out = "QRKB";
  detail::put<std::uint32_t>(out, kBundleVersion);
  const std::string meta = bundle_metadata(m).dump();
  detail::put<std::uint64_t>(out, meta.size());
  out += meta;
  const auto params = m.all_params();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out += p->name;
    detail::put<std::uint32_t>(out, 2);
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.rows()));
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.cols()));
    out.append(reinterpret_cast<const char*>(p->value.data()),
               static_cast<std::size_t>(p->value.size()) * sizeof(double));
  }
  return out;
}

inline Model model_from_bytes(std::string_view bytes) {
  detail::Reader r{bytes};
  if (r.bytes(4) != "QRKB") throw ModelError("not a model bundle");
  if (r.get<std::uint32_t>() != kBundleVersion) throw ModelError("unsupported bundle version");
  const auto meta_len = r.get<std::uint64_t>();
  json meta;
  try {
    meta = json::parse(r.bytes(meta_len));
  } catch (const json::exception& e) {
    throw ModelError("bundle metadata is malformed: " + std::string(e.what()));
  }
  Model m;
  try {
    m.hyper = hyper_from_json(meta.at("hyper"));
    m.ablation = Ablation::parse(meta.at("ablation").get<std::string>());
    for (const auto& e : meta.at("catalog"))
      m.catalog.add(dsl::parse_template(e.at("template").get<std::string>(),
                                        dsl::dialect_from_string(e.at("dialect").get<std::string>())));
    const auto& sl = meta.at("slots");
    m.slots = {sl.at("switches").get<std::size_t>(), sl.at("functions").get<std::size_t>(),
               sl.at("containers").get<std::size_t>()};
    m.dropped_metrics = meta.at("dropped_metrics").get<std::vector<std::string>>();
    m.layout = telemetry::make_layout(m.slots, m.dropped_metrics, m.rank_order());
    m.log_norm.mean = meta.at("log_norm").at("mean").get<std::vector<double>>();
    m.log_norm.stdev = meta.at("log_norm").at("stdev").get<std::vector<double>>();
    for (auto k : telemetry::kAllKinds) {
      const auto& n = meta.at("candidate_norm").at(std::string(telemetry::to_string(k)));
      m.cand_norm[kind_index(k)] = {n.at("mean").get<std::vector<double>>(),
                                    n.at("stdev").get<std::vector<double>>()};
    }
    m.text = nn::TextEncoder::from_vocab(meta.at("vocab").get<std::vector<std::string>>(),
                                         static_cast<Eigen::Index>(m.hyper.hidden));
    auto ids = meta.at("identities").get<std::vector<std::string>>();
    m.set_identities(std::vector<std::string>(ids.begin() + (ids.empty() ? 0 : 1), ids.end()));
    m.trained = meta.at("trained").get<bool>();
    m.history = meta.value("history", json::object());
  } catch (const json::exception& e) {
    throw ModelError("bundle metadata is incomplete: " + std::string(e.what()));
  } catch (const ParseError& e) {
    throw ModelError("bundle catalog is malformed: " + std::string(e.what()));
  }
  m.allocate();
  std::map<std::string, nn::Param*> by_name;
  for (auto* p : m.all_params()) by_name[p->name] = p;
  const auto n = r.get<std::uint32_t>();
  std::set<std::string> loaded;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name(r.bytes(r.get<std::uint32_t>()));
    if (r.get<std::uint32_t>() != 2) throw ModelError("tensor " + name + " is not a matrix");
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ModelError("unexpected tensor " + name);
    auto& v = it->second->value;
    if (std::uint64_t(v.rows()) != rows || std::uint64_t(v.cols()) != cols)
      throw ModelError("tensor " + name + " has the wrong shape");
    const auto raw = r.bytes(rows * cols * sizeof(double));
    std::memcpy(v.data(), raw.data(), raw.size());
    it->second->grad = Mat::Zero(v.rows(), v.cols());
    loaded.insert(name);
  }
  if (loaded.size() != by_name.size()) throw ModelError("bundle is missing tensors");
  if (r.pos != bytes.size()) throw ModelError("trailing bytes after bundle");
  m.refresh_caches();
  return m;
}

inline void save_bundle(Model& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot write bundle to " + path);
  const auto bytes = bundle_bytes(m);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InvalidArgument("failed writing bundle to " + path);
}

inline Model load_bundle(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw NotFound("bundle not found: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return model_from_bytes(ss.str());
}

}  // namespace qrank::ranker
