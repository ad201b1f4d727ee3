#include "stagekd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "stagekd/errors.hpp"

namespace stagekd {

using nlohmann::json;
namespace fs = std::filesystem;

const char* substage_name(SubstageKind k) {
  switch (k) {
    case SubstageKind::response: return "response";
    case SubstageKind::feature: return "feature";
    default: return "relation";
  }
}

SubstageKind substage_from_name(const std::string& name) {
  if (name == "response") return SubstageKind::response;
  if (name == "feature") return SubstageKind::feature;
  if (name == "relation") return SubstageKind::relation;
  throw ConfigError("unknown substage kind: " + name);
}

Recipe Recipe::single(SubstageKind k) {
  Recipe r;
  r.combination = false;
  r.kind = k;
  return r;
}

Recipe Recipe::combination_stage(CsRecipe cs) {
  if (cs.auxiliaries.empty())
    throw ConfigError("combination stage needs at least one auxiliary substage");
  Recipe r;
  r.combination = true;
  r.cs = std::move(cs);
  return r;
}

bool Recipe::uses(SubstageKind k) const {
  if (!combination) return kind == k;
  if (cs.backbone == k) return true;
  for (SubstageKind a : cs.auxiliaries)
    if (a == k) return true;
  return false;
}

std::string Recipe::label() const {
  if (!combination) return substage_name(kind);
  std::string s;
  switch (cs.backbone) {
    case SubstageKind::response: s = "rp_cs"; break;
    case SubstageKind::feature: s = "fe_cs"; break;
    default: s = "re_cs"; break;
  }
  return s;
}

void CascadeLadder::validate() const {
  if (rungs.size() < 2) throw ConfigError("cascade ladder needs teacher and student rungs");
  std::int64_t prev = -1;
  for (std::size_t i = 0; i < rungs.size(); ++i) {
    NetworkSpec s = rungs[i];
    s.finalize();
    if (s.num_classes != rungs[0].num_classes)
      throw ConfigError("ladder rungs disagree on class count");
    Network probe(s);
    std::int64_t n = probe.param_count();
    if (prev >= 0 && n > prev)
      throw ConfigError("ladder capacity must be non-increasing (rung " + std::to_string(i) +
                        " grows from " + std::to_string(prev) + " to " + std::to_string(n) + ")");
    prev = n;
  }
}

CascadeLadder make_ladder(const NetworkSpec& teacher, const NetworkSpec& student,
                          int cascade_n, const std::string& assistant_mode) {
  if (cascade_n < 0) throw ConfigError("cascade_n must be >= 0");
  NetworkSpec t = teacher, s = student;
  t.finalize();
  s.finalize();
  CascadeLadder ladder;
  ladder.rungs.push_back(t);
  for (int i = 1; i <= cascade_n; ++i) {
    if (assistant_mode == "reinit") {
      ladder.rungs.push_back(s);
    } else if (assistant_mode == "interp") {
      double a = static_cast<double>(i) / (cascade_n + 1);
      NetworkSpec mid = s;
      mid.width = std::pow(t.width, 1.0 - a) * std::pow(s.width, a);
      mid.depth = static_cast<int>(std::lround(t.depth + (s.depth - t.depth) * a));
      mid.tap_names.clear();
      mid.finalize();
      ladder.rungs.push_back(mid);
    } else {
      throw ConfigError("unknown assistant mode: " + assistant_mode);
    }
  }
  ladder.rungs.push_back(s);
  ladder.validate();
  return ladder;
}

std::vector<std::pair<std::string, Recipe>> default_cs_branches() {
  CsRecipe rp{SubstageKind::response, {SubstageKind::feature, SubstageKind::relation}};
  CsRecipe fe{SubstageKind::response, {SubstageKind::feature}};
  CsRecipe re{SubstageKind::response, {SubstageKind::relation}};
  return {{"rp_cs", Recipe::combination_stage(rp)},
          {"fe_cs", Recipe::combination_stage(fe)},
          {"re_cs", Recipe::combination_stage(re)}};
}

// ---------------------------------------------------------------------------
// DistillObjective

namespace {

FeatureMap slice_map(const Tensor& batch_tap, int row, const std::string& name) {
  const int C = batch_tap.dim(1), H = batch_tap.dim(2), W = batch_tap.dim(3);
  FeatureMap f;
  f.layer_name = name;
  f.data = Tensor({C, H, W});
  const double* src = batch_tap.data() + static_cast<std::int64_t>(row) * C * H * W;
  std::copy(src, src + static_cast<std::int64_t>(C) * H * W, f.data.data());
  return f;
}

void add_slice(Tensor& batch_grad, int row, const Tensor& g, double scale) {
  double* dst = batch_grad.data() + static_cast<std::int64_t>(row) * g.size();
  const double* src = g.data();
  for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace

struct DistillObjective::Impl {
  NetworkSpec teacher_spec;
  NetworkSpec student_spec;
  Network teacher;
  std::string teacher_hash;
  Recipe recipe;
  std::string label;
  DistillOptions opts;
  LossWeights w;

  std::vector<std::string> feature_taps;
  std::vector<std::pair<std::string, std::string>> fsp_pairs;
  std::vector<std::string> needed_taps;  // union, in teacher tap order

  std::map<std::string, int> teacher_tap_index;
  std::map<std::string, int> student_tap_index;
  std::map<std::string, int> k_at;

  std::map<std::string, ChannelAdapter> adapters;
  std::map<std::string, Tensor> adapter_gw, adapter_gb;

  const Dataset* cache_src = nullptr;
  bool cache_ready = false;
  Tensor cached_logits;
  std::map<std::string, Tensor> cached_taps;

  Impl(const NetworkSpec& tspec, const TrainedWeights& tw, const NetworkSpec& sspec,
       Recipe r, const DistillOptions& o, const Dataset* cache, std::uint64_t adapter_seed)
      : teacher_spec(tspec), student_spec(sspec), teacher(tspec), recipe(r),
        label(r.label()), opts(o), w(o.weights), cache_src(cache) {
    teacher.load(tw);
    teacher_hash = weights_hash(tw);
    if (teacher_spec.num_classes != student_spec.num_classes)
      throw ConfigError("teacher and student disagree on class count");

    for (std::size_t i = 0; i < teacher_spec.tap_names.size(); ++i)
      teacher_tap_index[teacher_spec.tap_names[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < student_spec.tap_names.size(); ++i)
      student_tap_index[student_spec.tap_names[i]] = static_cast<int>(i);

    std::set<std::string> need;
    if (recipe.uses(SubstageKind::feature)) {
      feature_taps = opts.feature_taps;
      if (feature_taps.empty()) throw ConfigError("feature substage needs at least one tap");
      for (const auto& t : feature_taps) {
        require_tap(t);
        need.insert(t);
      }
    }
    if (recipe.uses(SubstageKind::relation)) {
      fsp_pairs = opts.fsp_pairs;
      if (fsp_pairs.empty()) throw ConfigError("relation substage needs at least one FSP pair");
      for (const auto& [a, b] : fsp_pairs) {
        require_tap(a);
        require_tap(b);
        need.insert(a);
        need.insert(b);
      }
    }
    for (const auto& t : teacher_spec.tap_names)
      if (need.count(t)) needed_taps.push_back(t);

    // adapters wherever channel-aligned terms (DF, FSP) see a width mismatch
    Rng arng(adapter_seed);
    std::set<std::string> channel_aligned;
    for (const auto& t : feature_taps) channel_aligned.insert(t);  // DF per feature tap
    for (const auto& [a, b] : fsp_pairs) {
      channel_aligned.insert(a);
      channel_aligned.insert(b);
    }
    for (const auto& t : needed_taps) {
      if (!channel_aligned.count(t)) continue;
      int ct = teacher.tap_channels(t);
      int cs = student_channels(t);
      if (ct != cs) {
        adapters.emplace(t, ChannelAdapter::init(cs, ct, arng));
        adapter_gw[t] = Tensor({ct, cs});
        adapter_gb[t] = Tensor({ct});
      }
    }
    for (const auto& t : feature_taps)
      k_at[t] = std::min(w.k_channels, teacher.tap_channels(t));
    if (w.k_channels < 1) throw ConfigError("k_channels must be >= 1");
  }

  void require_tap(const std::string& t) {
    if (!teacher_tap_index.count(t))
      throw ConfigError("teacher has no tap named '" + t + "'");
    if (!student_tap_index.count(t))
      throw ConfigError("student has no tap named '" + t + "'");
  }

  int student_channels(const std::string& tap) {
    NetworkSpec s = student_spec;
    Network probe(s);
    return probe.tap_channels(tap);
  }

  void build_cache() {
    const Dataset& d = *cache_src;
    const int N = d.size();
    cached_logits = Tensor({N, teacher_spec.num_classes});
    const int bs = 64;
    for (int start = 0; start < N; start += bs) {
      int end = std::min(N, start + bs);
      std::vector<int> ids(static_cast<std::size_t>(end - start));
      std::iota(ids.begin(), ids.end(), start);
      Tensor x({end - start, d.images.dim(1), d.images.dim(2), d.images.dim(3)});
      const std::int64_t per = static_cast<std::int64_t>(d.images.dim(1)) * d.images.dim(2) *
                               d.images.dim(3);
      for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy(d.images.data() + ids[i] * per, d.images.data() + (ids[i] + 1) * per,
                  x.data() + static_cast<std::int64_t>(i) * per);
      Network::BatchOut out = teacher.forward(x, false);
      for (int i = 0; i < end - start; ++i)
        for (int c = 0; c < teacher_spec.num_classes; ++c)
          cached_logits.at(start + i, c) = out.logits.at(i, c);
      for (const auto& tname : needed_taps) {
        const Tensor& tap = out.taps[static_cast<std::size_t>(teacher_tap_index[tname])];
        Tensor& store = cached_taps[tname];
        if (store.empty())
          store = Tensor({N, tap.dim(1), tap.dim(2), tap.dim(3)});
        const std::int64_t tper = static_cast<std::int64_t>(tap.dim(1)) * tap.dim(2) * tap.dim(3);
        for (int i = 0; i < end - start; ++i)
          std::copy(tap.data() + i * tper, tap.data() + (i + 1) * tper,
                    store.data() + (static_cast<std::int64_t>(start) + i) * tper);
      }
    }
    cache_ready = true;
  }
};

DistillObjective::DistillObjective(const NetworkSpec& teacher_spec,
                                   const TrainedWeights& teacher_weights,
                                   const NetworkSpec& student_spec, Recipe recipe,
                                   const DistillOptions& opts, const Dataset* cache_source,
                                   std::uint64_t adapter_seed) {
  NetworkSpec ts = teacher_spec, ss = student_spec;
  ts.finalize();
  ss.finalize();
  impl_ = std::make_unique<Impl>(ts, teacher_weights, ss, recipe, opts, cache_source,
                                 adapter_seed);
}

DistillObjective::~DistillObjective() = default;

const char* DistillObjective::name() const { return impl_->label.c_str(); }

std::vector<ParamRef> DistillObjective::extra_params() {
  std::vector<ParamRef> out;
  for (auto& [tap, ad] : impl_->adapters) {
    out.push_back({"adapter." + tap + ".w", &ad.weight, &impl_->adapter_gw[tap]});
    out.push_back({"adapter." + tap + ".b", &ad.bias, &impl_->adapter_gb[tap]});
  }
  return out;
}

std::int64_t DistillObjective::extra_param_count() const {
  std::int64_t n = 0;
  for (const auto& [tap, ad] : impl_->adapters) n += ad.param_count();
  return n;
}

std::map<std::string, int> DistillObjective::effective_k() const { return impl_->k_at; }

const std::string& DistillObjective::teacher_weights_hash() const {
  return impl_->teacher_hash;
}

LossBreakdown DistillObjective::compute(Network& net, const Tensor& x,
                                        const std::vector<int>& sample_ids,
                                        const std::vector<Target>& targets, bool backprop) {
  Impl& im = *impl_;
  const int N = x.dim(0);
  const int C = im.student_spec.num_classes;
  const Recipe& recipe = im.recipe;
  const LossWeights& w = im.w;

  Network::BatchOut s_out = net.forward(x, backprop);
  if (!s_out.logits.all_finite())
    throw TrainingError("non-finite student logits (diverged weights)");

  // teacher outputs, cached across epochs when the input pipeline is static
  Tensor t_logits_batch;
  std::map<std::string, const Tensor*> t_tap_src;  // batch-shaped or cache-shaped
  std::vector<int> t_rows(static_cast<std::size_t>(N));
  Network::BatchOut t_out;
  bool from_cache = false;
  if (im.cache_src != nullptr) {
    if (!im.cache_ready) im.build_cache();
    from_cache = true;
    for (int i = 0; i < N; ++i) t_rows[static_cast<std::size_t>(i)] = sample_ids[static_cast<std::size_t>(i)];
    for (const auto& tname : im.needed_taps) t_tap_src[tname] = &im.cached_taps[tname];
  } else {
    t_out = im.teacher.forward(x, false);
    for (int i = 0; i < N; ++i) t_rows[static_cast<std::size_t>(i)] = i;
    for (const auto& tname : im.needed_taps)
      t_tap_src[tname] = &t_out.taps[static_cast<std::size_t>(im.teacher_tap_index[tname])];
  }
  const Tensor& t_logits = from_cache ? im.cached_logits : t_out.logits;

  // loss composition coefficients per recipe
  double c_resp = 0.0, c_feat = 0.0, c_rel = 0.0;
  if (recipe.combination) {
    if (recipe.uses(SubstageKind::response)) c_resp = w.eta;
    if (recipe.uses(SubstageKind::feature)) c_feat = w.xi;
    if (recipe.uses(SubstageKind::relation)) c_rel = w.tau_w;
  } else {
    switch (recipe.kind) {
      case SubstageKind::response: c_resp = w.lambda_; break;
      case SubstageKind::feature: c_feat = 1.0; break;
      case SubstageKind::relation: c_rel = w.gamma; break;
    }
  }

  Tensor dlogits;
  std::map<std::string, Tensor> tap_grads;
  if (backprop) {
    dlogits = Tensor({N, C});
    for (const auto& tname : im.needed_taps) {
      const Tensor& st = s_out.taps[static_cast<std::size_t>(im.student_tap_index.at(tname))];
      tap_grads[tname] = Tensor(st.shape());
    }
  }

  const double kl_scale = w.scale_kl_by_t2 ? w.temperature * w.temperature : 1.0;
  const double inv_n = 1.0 / static_cast<double>(N);

  LossBreakdown lb;
  LogitVector s_row(static_cast<std::size_t>(C)), t_row(static_cast<std::size_t>(C)), ce_grad;
  for (int i = 0; i < N; ++i) {
    for (int c = 0; c < C; ++c) {
      s_row[static_cast<std::size_t>(c)] = s_out.logits.at(i, c);
      t_row[static_cast<std::size_t>(c)] = t_logits.at(t_rows[static_cast<std::size_t>(i)], c);
    }

    double ce = cross_entropy(s_row, targets[static_cast<std::size_t>(i)],
                              backprop ? &ce_grad : nullptr);
    lb.ce += ce;

    double resp_term = 0.0;
    SoftDistribution pt, ps;
    if (recipe.uses(SubstageKind::response)) {
      pt = soften(t_row, w.temperature);
      ps = soften(s_row, w.temperature);
      resp_term = kl_scale * kl_divergence(pt, ps);
      lb.response += resp_term;
    }
    if (backprop) {
      for (int c = 0; c < C; ++c) {
        double g = ce_grad[static_cast<std::size_t>(c)];
        if (recipe.uses(SubstageKind::response))
          g += c_resp * kl_scale / w.temperature *
               (ps.probs[static_cast<std::size_t>(c)] - pt.probs[static_cast<std::size_t>(c)]);
        dlogits.at(i, c) += g * inv_n;
      }
    }

    double feat_term = 0.0;
    if (recipe.uses(SubstageKind::feature)) {
      for (const auto& tname : im.feature_taps) {
        FeatureMap ft = slice_map(*t_tap_src.at(tname), t_rows[static_cast<std::size_t>(i)], tname);
        const Tensor& s_batch =
            s_out.taps[static_cast<std::size_t>(im.student_tap_index.at(tname))];
        FeatureMap fsm = slice_map(s_batch, i, tname);

        // spatial alignment: resize the teacher side when allowed (constant
        // w.r.t. the student, so no extra backward path)
        if (ft.height() != fsm.height() || ft.width() != fsm.width()) {
          if (!im.opts.resize_spatial_mismatch)
            throw InputError("tap '" + tname + "' differs spatially; enable resize");
          ft.data = resize_bilinear(ft.data, fsm.height(), fsm.width());
        }

        Tensor g_at;
        double at = at_distance(ft, fsm, backprop ? &g_at : nullptr);
        if (backprop) add_slice(tap_grads[tname], i, g_at, c_feat * w.alpha * inv_n);

        auto ad_it = im.adapters.find(tname);
        double df;
        if (ad_it == im.adapters.end()) {
          Tensor g_df;
          df = df_distance(ft, fsm, im.k_at.at(tname), backprop ? &g_df : nullptr);
          if (backprop) add_slice(tap_grads[tname], i, g_df, c_feat * w.beta * inv_n);
        } else {
          ChannelAdapter& ad = ad_it->second;
          FeatureMap proj = ad.apply(fsm);
          Tensor g_proj;
          df = df_distance(ft, proj, im.k_at.at(tname), backprop ? &g_proj : nullptr);
          if (backprop) {
            // the composition weight rides along into the adapter grads
            g_proj *= c_feat * w.beta * inv_n;
            Tensor g_in;
            ad.backward(fsm, g_proj, &g_in, &im.adapter_gw[tname], &im.adapter_gb[tname]);
            add_slice(tap_grads[tname], i, g_in, 1.0);
          }
        }
        feat_term += w.alpha * at + w.beta * df;
      }
      lb.feature += feat_term;
    }

    double rel_term = 0.0;
    if (recipe.uses(SubstageKind::relation)) {
      for (const auto& [a, b] : im.fsp_pairs) {
        FeatureMap fta = slice_map(*t_tap_src.at(a), t_rows[static_cast<std::size_t>(i)], a);
        FeatureMap ftb = slice_map(*t_tap_src.at(b), t_rows[static_cast<std::size_t>(i)], b);
        const Tensor& sa_batch = s_out.taps[static_cast<std::size_t>(im.student_tap_index.at(a))];
        const Tensor& sb_batch = s_out.taps[static_cast<std::size_t>(im.student_tap_index.at(b))];
        FeatureMap fsa = slice_map(sa_batch, i, a);
        FeatureMap fsb = slice_map(sb_batch, i, b);

        if (fta.height() != fsa.height() || fta.width() != fsa.width() ||
            ftb.height() != fsb.height() || ftb.width() != fsb.width()) {
          if (!im.opts.resize_spatial_mismatch)
            throw InputError("FSP pair (" + a + "," + b + ") differs spatially; enable resize");
          fta.data = resize_bilinear(fta.data, fsa.height(), fsa.width());
          ftb.data = resize_bilinear(ftb.data, fsb.height(), fsb.width());
        }

        ChannelAdapter* ad_a = im.adapters.count(a) ? &im.adapters.at(a) : nullptr;
        ChannelAdapter* ad_b = im.adapters.count(b) ? &im.adapters.at(b) : nullptr;
        FeatureMap pa = ad_a ? ad_a->apply(fsa) : fsa;
        FeatureMap pb = ad_b ? ad_b->apply(fsb) : fsb;

        FspMatrix gt = fsp_matrix(fta, ftb);
        FspMatrix gs = fsp_matrix(pa, pb);
        const double inv_sz = 1.0 / static_cast<double>(gt.data.size());
        double mse = 0.0;
        for (std::int64_t j = 0; j < gt.data.size(); ++j) {
          double d = gt.data[j] - gs.data[j];
          mse += d * d;
        }
        mse *= inv_sz;
        rel_term += mse;

        if (backprop) {
          Tensor dG(gs.data.shape());
          for (std::int64_t j = 0; j < dG.size(); ++j)
            dG[j] = 2.0 * (gs.data[j] - gt.data[j]) * inv_sz * c_rel * inv_n;
          Tensor dpa, dpb;
          fsp_matrix_backward(pa, pb, dG, &dpa, &dpb);
          if (ad_a) {
            Tensor g_in;
            ad_a->backward(fsa, dpa, &g_in, &im.adapter_gw[a], &im.adapter_gb[a]);
            add_slice(tap_grads[a], i, g_in, 1.0);
          } else {
            add_slice(tap_grads[a], i, dpa, 1.0);
          }
          if (ad_b) {
            Tensor g_in;
            ad_b->backward(fsb, dpb, &g_in, &im.adapter_gw[b], &im.adapter_gb[b]);
            add_slice(tap_grads[b], i, g_in, 1.0);
          } else {
            add_slice(tap_grads[b], i, dpb, 1.0);
          }
        }
      }
      lb.relation += rel_term;
    }

    lb.total += ce + c_resp * resp_term + c_feat * feat_term + c_rel * rel_term;
  }

  lb.total *= inv_n;
  lb.ce *= inv_n;
  lb.response *= inv_n;
  lb.feature *= inv_n;
  lb.relation *= inv_n;

  if (backprop) net.backward(dlogits, tap_grads);
  return lb;
}

// ---------------------------------------------------------------------------
// Run orchestration

namespace {

json spec_to_json(const NetworkSpec& s) {
  return json{{"family", family_name(s.family)}, {"depth", s.depth},
              {"width", s.width},                {"classes", s.num_classes},
              {"in_channels", s.in_channels},    {"taps", s.tap_names}};
}

json schedule_to_json(const TrainingSchedule& s) {
  return json{{"epochs", s.epochs},
              {"batch_size", s.batch_size},
              {"optimizer", optimizer_name(s.optimizer)},
              {"lr", s.lr},
              {"momentum", s.momentum},
              {"lr_decay", s.lr_decay},
              {"decay_epochs", s.decay_epochs},
              {"weight_decay", s.weight_decay},
              {"seed", s.seed},
              {"augment", s.augment},
              {"augment_pad", s.augment_pad}};
}

json weights_to_json(const LossWeights& w) {
  return json{{"lambda", w.lambda_}, {"alpha", w.alpha},   {"beta", w.beta},
              {"gamma", w.gamma},    {"eta", w.eta},       {"xi", w.xi},
              {"tau_w", w.tau_w},    {"temperature", w.temperature},
              {"k_channels", w.k_channels}, {"scale_kl_by_t2", w.scale_kl_by_t2}};
}

void write_json(const std::string& path, const json& j) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << j.dump(2) << "\n";
}

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return json::parse(is);
}

json recipe_to_json(const Recipe& r) {
  json j{{"label", r.label()}, {"combination", r.combination}};
  if (r.combination) {
    j["backbone"] = substage_name(r.cs.backbone);
    std::vector<std::string> aux;
    for (auto k : r.cs.auxiliaries) aux.push_back(substage_name(k));
    j["auxiliaries"] = aux;
  } else {
    j["kind"] = substage_name(r.kind);
  }
  return j;
}

}  // namespace

TrainedWeights distill_once(const NetworkSpec& teacher_spec,
                            const TrainedWeights& teacher_weights,
                            const NetworkSpec& student_spec, const Recipe& recipe,
                            const DistillOptions& opts, const Dataset& train_data,
                            const Dataset& val_data, const TrainingSchedule& schedule,
                            const std::string& run_dir, std::uint64_t student_init_seed,
                            TrainResult* out_result) {
  NetworkSpec ts = teacher_spec, ss = student_spec;
  ts.finalize();
  ss.finalize();

  const bool can_cache = opts.cache_teacher && !schedule.augment;
  DistillObjective objective(ts, teacher_weights, ss, recipe, opts,
                             can_cache ? &train_data : nullptr,
                             student_init_seed ^ 0xada9c0ffeeull);

  Network student(ss);
  student.init(student_init_seed);

  if (!run_dir.empty()) {
    json snap{{"branch", recipe.label()},
              {"recipe", recipe_to_json(recipe)},
              {"teacher_fingerprint", spec_fingerprint(ts)},
              {"teacher_weights_hash", objective.teacher_weights_hash()},
              {"teacher_spec", spec_to_json(ts)},
              {"student_spec", spec_to_json(ss)},
              {"student_fingerprint", spec_fingerprint(ss)},
              {"student_init_seed", student_init_seed},
              {"loss_weights", weights_to_json(opts.weights)},
              {"schedule", schedule_to_json(schedule)},
              {"feature_taps", opts.feature_taps},
              {"extra_params", objective.extra_param_count()},
              {"effective_k", objective.effective_k()},
              {"teacher_cached", can_cache},
              {"integration", opts.integration}};
    json pairs = json::array();
    for (const auto& [a, b] : opts.fsp_pairs) pairs.push_back(json::array({a, b}));
    snap["fsp_pairs"] = pairs;
    write_json(run_dir + "/config-snapshot", snap);
  }

  TrainResult res = train_network(student, objective, train_data, val_data, schedule, run_dir);

  if (!run_dir.empty()) {
    save_checkpoint(run_dir + "/checkpoint", ss, res.final_weights);
    save_checkpoint(run_dir + "/checkpoint-best", ss, res.best_weights);
    json snap = read_json(run_dir + "/config-snapshot");
    snap["result"] = json{{"student_weights_hash", weights_hash(res.final_weights)},
                          {"best_val_top1", res.best_val_top1},
                          {"completed_epochs", res.completed_epochs},
                          {"mean_batch_ms", res.mean_batch_ms}};
    write_json(run_dir + "/config-snapshot", snap);
  }
  TrainedWeights final_w = res.final_weights;
  if (out_result) *out_result = std::move(res);
  return final_w;
}

TrainedWeights cascade(const CascadeLadder& ladder, const TrainedWeights& teacher_weights,
                       const Recipe& recipe, const DistillOptions& opts,
                       const Dataset& train_data, const Dataset& val_data,
                       const TrainingSchedule& schedule, const std::string& branch_dir,
                       std::uint64_t seed) {
  ladder.validate();
  TrainedWeights current = teacher_weights;
  for (std::size_t r = 1; r < ladder.rungs.size(); ++r) {
    std::string rung_dir =
        branch_dir.empty() ? "" : branch_dir + "/rung-" + std::to_string(r);
    try {
      current = distill_once(ladder.rungs[r - 1], current, ladder.rungs[r], recipe, opts,
                             train_data, val_data, schedule, rung_dir, seed);
    } catch (const TrainingError& e) {
      throw TrainingError("cascade aborted at rung " + std::to_string(r) + " (" +
                          recipe.label() + "): " + e.what());
    }
  }
  return current;
}

TrainedWeights integrate_weights(const std::vector<TrainedWeights>& branches) {
  if (branches.empty()) throw InputError("integrate_weights: empty branch list");
  const std::string& fp = branches[0].spec_fingerprint;
  for (const auto& b : branches)
    if (b.spec_fingerprint != fp)
      throw InputError("integrate_weights: fingerprint mismatch across branches");

  TrainedWeights out = branches[0];
  const std::size_t n = branches.size();
  std::vector<double> vals(n);
  for (auto& [name, t] : out.entries) {
    std::vector<const Tensor*> srcs(n);
    srcs[0] = &branches[0].entries.at(name);
    for (std::size_t b = 1; b < n; ++b) {
      const auto it = branches[b].entries.find(name);
      if (it == branches[b].entries.end() || !it->second.same_shape(t))
        throw InputError("integrate_weights: parameter mismatch at " + name);
      srcs[b] = &it->second;
    }
    for (std::int64_t i = 0; i < t.size(); ++i) {
      for (std::size_t b = 0; b < n; ++b) vals[b] = (*srcs[b])[i];
      // canonical summation order makes the mean independent of branch
      // ordering, and the all-equal case stays exact
      std::sort(vals.begin(), vals.end());
      if (vals.front() == vals.back()) {
        t[i] = vals.front();
        continue;
      }
      double sum = 0.0;
      for (double v : vals) sum += v;
      t[i] = sum / static_cast<double>(n);
    }
  }
  return out;
}

namespace {

StagedResult staged_train(const DistillJob& job, const Dataset& train_data,
                          const Dataset& val_data, const std::string& run_dir,
                          const std::vector<std::pair<std::string, Recipe>>& branches) {
  NetworkSpec ts = job.teacher_spec, ss = job.student_spec;
  ts.finalize();
  ss.finalize();
  CascadeLadder ladder = make_ladder(ts, ss, job.cascade_n, job.options.assistant_mode);

  StagedResult result;
  std::vector<TrainedWeights> finals;
  for (const auto& [kind, recipe] : branches) {
    std::string branch_dir = run_dir.empty() ? "" : run_dir + "/branch-" + kind;
    TrainedWeights wts = cascade(ladder, job.teacher_weights, recipe, job.options,
                                 train_data, val_data, job.schedule, branch_dir, job.seed);
    BranchResult br;
    br.kind = kind;
    br.val_top1 = val_data.size() ? evaluate(ss, wts, val_data).top1 : 0.0;
    br.student = wts;
    finals.push_back(std::move(wts));
    result.branches.push_back(std::move(br));
  }

  result.integrated = integrate_weights(finals);
  result.average_eval =
      val_data.size() ? evaluate(ss, result.integrated, val_data) : EvalReport{};
  std::vector<NetworkSpec> specs(finals.size(), ss);
  result.ensemble_eval =
      val_data.size() ? ensemble_evaluate(specs, finals, val_data) : EvalReport{};
  result.selected_integration = job.options.integration;

  if (!run_dir.empty()) {
    save_checkpoint(run_dir + "/integrated/checkpoint", ss, result.integrated);
    json summary{{"selected_integration", result.selected_integration},
                 {"average_top1", result.average_eval.top1},
                 {"average_top5", result.average_eval.top5},
                 {"ensemble_top1", result.ensemble_eval.top1},
                 {"ensemble_top5", result.ensemble_eval.top5},
                 {"cascade_n", job.cascade_n},
                 {"integrated_weights_hash", weights_hash(result.integrated)}};
    json jb = json::array();
    for (const auto& br : result.branches)
      jb.push_back(json{{"kind", br.kind},
                        {"val_top1", br.val_top1},
                        {"weights_hash", weights_hash(br.student)}});
    summary["branches"] = jb;
    write_json(run_dir + "/summary.json", summary);
  }
  return result;
}

}  // namespace

StagedResult skd_train(const DistillJob& job, const Dataset& train_data,
                       const Dataset& val_data, const std::string& run_dir) {
  std::vector<std::pair<std::string, Recipe>> branches{
      {"response", Recipe::single(SubstageKind::response)},
      {"feature", Recipe::single(SubstageKind::feature)},
      {"relation", Recipe::single(SubstageKind::relation)}};
  return staged_train(job, train_data, val_data, run_dir, branches);
}

StagedResult rskd_train(const DistillJob& job, const Dataset& train_data,
                        const Dataset& val_data, const std::string& run_dir) {
  auto branches = job.cs_branches.empty() ? default_cs_branches() : job.cs_branches;
  return staged_train(job, train_data, val_data, run_dir, branches);
}

OverheadReport overhead_report(const std::string& run_dir) {
  OverheadReport rep;
  struct Acc {
    double wall = 0.0;
    std::int64_t steps = 0;
    std::int64_t extra = 0;
  };
  std::map<std::string, Acc> branches;

  auto consume_rung = [&](const std::string& branch, const fs::path& rung_dir) {
    fs::path metrics = rung_dir / "metrics.jsonl";
    fs::path snap = rung_dir / "config-snapshot";
    if (!fs::exists(metrics) || !fs::exists(snap))
      throw IoError("incomplete run logs under " + rung_dir.string());
    Acc& acc = branches[branch];
    for (const auto& rec : read_metrics(metrics.string())) {
      if (rec.split != "train") continue;
      acc.wall += rec.wall_ms;
      acc.steps += rec.steps;
    }
    json j = read_json(snap.string());
    acc.extra = std::max<std::int64_t>(acc.extra, j.value("extra_params", 0));
  };

  bool found = false;
  if (fs::exists(fs::path(run_dir) / "metrics.jsonl")) {
    consume_rung("single", run_dir);
    found = true;
  } else if (fs::is_directory(run_dir)) {
    std::vector<fs::path> branch_dirs;
    for (const auto& e : fs::directory_iterator(run_dir))
      if (e.is_directory() && e.path().filename().string().rfind("branch-", 0) == 0)
        branch_dirs.push_back(e.path());
    std::sort(branch_dirs.begin(), branch_dirs.end());
    for (const auto& bd : branch_dirs) {
      std::string branch = bd.filename().string().substr(7);
      std::vector<fs::path> rungs;
      for (const auto& e : fs::directory_iterator(bd))
        if (e.is_directory() && e.path().filename().string().rfind("rung-", 0) == 0)
          rungs.push_back(e.path());
      std::sort(rungs.begin(), rungs.end());
      for (const auto& rd : rungs) {
        consume_rung(branch, rd);
        found = true;
      }
    }
  }
  if (!found) throw IoError("no training logs found under " + run_dir);

  double wall = 0.0;
  std::int64_t steps = 0;
  for (const auto& [branch, acc] : branches) {
    rep.branch_extra_params[branch] = acc.extra;
    rep.branch_time_per_batch_ms[branch] = acc.steps ? acc.wall / acc.steps : 0.0;
    rep.extra_params += acc.extra;
    wall += acc.wall;
    steps += acc.steps;
  }
  rep.time_per_batch_ms = steps ? wall / steps : 0.0;
  return rep;
}

}  // namespace stagekd
