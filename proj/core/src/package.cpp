#include "stagekd/package.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "stagekd/errors.hpp"

namespace stagekd {

using nlohmann::json;
namespace fs = std::filesystem;

double normalized_entropy(const std::vector<double>& probs) {
  if (probs.size() < 2) throw InputError("normalized_entropy: need at least 2 classes");
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h / std::log(static_cast<double>(probs.size()));
}

const char* weight_scheme_name(WeightScheme s) {
  return s == WeightScheme::uniform ? "uniform" : "confidence";
}

WeightScheme weight_scheme_from_name(const std::string& name) {
  if (name == "uniform") return WeightScheme::uniform;
  if (name == "confidence") return WeightScheme::confidence;
  throw ConfigError("unknown weight scheme: " + name);
}

SoftLabel original_label(const Tensor& image, Network& pretrained) {
  if (image.ndim() != 3) throw InputError("original_label: expected C×H×W image");
  Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)});
  std::copy(image.data(), image.data() + image.size(), batch.data());
  Network::BatchOut out = pretrained.forward(batch, false);
  const int C = out.logits.dim(1);
  LogitVector logits(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) logits[static_cast<std::size_t>(c)] = out.logits.at(0, c);
  SoftLabel lbl;
  lbl.probs = soften(logits, 1.0).probs;
  lbl.uncertainty = normalized_entropy(lbl.probs);
  return lbl;
}

SoftLabel original_label(const Tensor& image, const NetworkSpec& spec,
                         const TrainedWeights& pretrained) {
  NetworkSpec s = spec;
  s.finalize();
  Network net(s);
  net.load(pretrained);
  return original_label(image, net);
}

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

Tensor perturb_frame(const Tensor& image, const PerturbParams& p, Rng& rng) {
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const double m = p.magnitude;

  if (p.anomaly_rate > 0.0 && rng.uniform() < p.anomaly_rate) {
    // anomalous frame: unrelated noise, downstream selection should drop it
    Tensor noise(image.shape());
    for (std::int64_t i = 0; i < noise.size(); ++i) noise[i] = rng.uniform(0.0, 1.0);
    return noise;
  }

  // photometric jitter
  double brightness = rng.uniform(-0.2 * m, 0.2 * m);
  double contrast = 1.0 + rng.uniform(-0.3 * m, 0.3 * m);

  // crop-resize: keep at least (1 - 0.25m) of each side
  double keep = 1.0 - 0.25 * m * rng.uniform();
  int ch = std::max(4, static_cast<int>(std::lround(H * keep)));
  int cw = std::max(4, static_cast<int>(std::lround(W * keep)));
  int oy = rng.uniform_int(0, H - ch);
  int ox = rng.uniform_int(0, W - cw);

  Tensor crop({C, ch, cw});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) crop.at(c, y, x) = image.at(c, y + oy, x + ox);
  Tensor out = (ch == H && cw == W) ? crop : resize_bilinear(crop, H, W);

  double sigma = 0.1 * m;
  for (std::int64_t i = 0; i < out.size(); ++i) {
    double v = (out[i] - 0.5) * contrast + 0.5 + brightness;
    if (sigma > 0.0) v += rng.normal(0.0, sigma);
    out[i] = clamp01(v);
  }
  return out;
}

}  // namespace

std::vector<Tensor> generate_frames(const Tensor& image, int count,
                                    const FrameGenerator& gen, std::uint64_t seed) {
  if (count < 1) throw ParameterError("generate_frames: count must be >= 1");
  if (image.ndim() != 3) throw InputError("generate_frames: expected C×H×W image");
  if (gen.kind == FrameGenerator::Kind::stochastic_perturbation) {
    if (gen.params.magnitude < 0.0 || gen.params.magnitude > 1.0)
      throw ConfigError("perturbation magnitude must be in [0,1]");
    if (image.dim(1) < 4 || image.dim(2) < 4)
      throw ConfigError("image too small for crop-resize perturbation");
  }

  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(count));
  frames.push_back(image);  // frame 0: unmodified source
  for (int f = 1; f < count; ++f) {
    std::uint64_t fseed = fnv1a(&f, sizeof(f), seed ^ 0x9e3779b97f4a7c15ull);
    if (gen.kind == FrameGenerator::Kind::external) {
      if (!gen.external_fn) throw ConfigError("external frame generator without a function");
      Tensor frame = gen.external_fn(image, fseed);
      if (!frame.same_shape(image))
        throw ConfigError("external generator changed the frame shape");
      frames.push_back(std::move(frame));
    } else {
      Rng rng(fseed);
      frames.push_back(perturb_frame(image, gen.params, rng));
    }
  }
  return frames;
}

std::vector<int> select_reliable_indices(const std::vector<SoftLabel>& labels,
                                         double threshold) {
  std::vector<int> kept;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].uncertainty <= threshold) kept.push_back(static_cast<int>(i));
  if (kept.empty() && !labels.empty()) {
    int best = 0;
    for (std::size_t i = 1; i < labels.size(); ++i)
      if (labels[i].uncertainty < labels[static_cast<std::size_t>(best)].uncertainty)
        best = static_cast<int>(i);
    kept.push_back(best);
  }
  return kept;
}

std::vector<SoftLabel> select_reliable(const std::vector<SoftLabel>& labels,
                                       double threshold) {
  std::vector<SoftLabel> out;
  for (int i : select_reliable_indices(labels, threshold))
    out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

LabelPackage aggregate_package(const std::vector<Tensor>& frames,
                               const std::vector<SoftLabel>& labels, WeightScheme scheme) {
  if (frames.size() != labels.size() || frames.empty())
    throw InputError("aggregate_package: need matching non-empty frames/labels");
  const std::size_t n = frames.size();
  LabelPackage pkg;
  pkg.frames = frames;
  pkg.labels = labels;
  pkg.weights.assign(n, 1.0 / static_cast<double>(n));

  if (scheme == WeightScheme::confidence) {
    double sum = 0.0;
    std::vector<double> conf(n);
    for (std::size_t i = 0; i < n; ++i) {
      conf[i] = std::max(0.0, 1.0 - labels[i].uncertainty);
      sum += conf[i];
    }
    if (sum > 1e-12) {
      for (std::size_t i = 0; i < n; ++i) pkg.weights[i] = conf[i] / sum;
    }
    // all-zero confidence falls back to uniform weights
  }

  const std::size_t C = labels[0].probs.size();
  pkg.aggregated.probs.assign(C, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i].probs.size() != C)
      throw InputError("aggregate_package: label class count mismatch");
    for (std::size_t c = 0; c < C; ++c)
      pkg.aggregated.probs[c] += pkg.weights[i] * labels[i].probs[c];
  }
  pkg.aggregated.uncertainty = normalized_entropy(pkg.aggregated.probs);
  return pkg;
}

// ---------------------------------------------------------------------------
// Store IO

namespace {

json soft_label_to_json(const SoftLabel& l) {
  return json{{"probs", l.probs}, {"uncertainty", l.uncertainty}};
}

SoftLabel soft_label_from_json(const json& j) {
  SoftLabel l;
  l.probs = j.at("probs").get<std::vector<double>>();
  l.uncertainty = j.at("uncertainty").get<double>();
  return l;
}

}  // namespace

void write_package_store(const std::string& dir, const std::vector<PackageRecord>& records) {
  fs::create_directories(dir);
  std::ofstream os(fs::path(dir) / "packages.jsonl", std::ios::trunc);
  std::ofstream idx(fs::path(dir) / "packages.idx", std::ios::trunc);
  if (!os || !idx) throw IoError("cannot write package store under " + dir);
  std::uint64_t offset = 0;
  for (const auto& r : records) {
    json labels = json::array();
    for (const auto& l : r.labels) labels.push_back(soft_label_to_json(l));
    json j{{"source_id", r.source_id},
           {"source_index", r.source_index},
           {"true_label", r.true_label},
           {"seed", r.seed},
           {"frame_count", r.frame_count},
           {"scheme", r.scheme},
           {"magnitude", r.params.magnitude},
           {"anomaly_rate", r.params.anomaly_rate},
           {"kept", r.kept},
           {"labels", labels},
           {"weights", r.weights},
           {"aggregated", soft_label_to_json(r.aggregated)}};
    std::string line = j.dump();
    os << line << "\n";
    idx << r.source_id << " " << offset << "\n";
    offset += line.size() + 1;
  }
}

std::vector<PackageRecord> read_package_store(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "packages.jsonl");
  if (!is) throw IoError("cannot read package store under " + dir);
  std::vector<PackageRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    PackageRecord r;
    r.source_id = j.at("source_id").get<std::string>();
    r.source_index = j.at("source_index").get<int>();
    r.true_label = j.at("true_label").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.frame_count = j.at("frame_count").get<int>();
    r.scheme = j.at("scheme").get<std::string>();
    r.params.magnitude = j.at("magnitude").get<double>();
    r.params.anomaly_rate = j.at("anomaly_rate").get<double>();
    r.kept = j.at("kept").get<std::vector<int>>();
    for (const auto& l : j.at("labels")) r.labels.push_back(soft_label_from_json(l));
    r.weights = j.at("weights").get<std::vector<double>>();
    r.aggregated = soft_label_from_json(j.at("aggregated"));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PackageRecord> build_packages(const Dataset& data, const NetworkSpec& spec,
                                          const TrainedWeights& pretrained,
                                          const PackagerConfig& cfg, std::uint64_t seed) {
  if (cfg.count < 1) throw ConfigError("package frame count must be >= 1");
  NetworkSpec s = spec;
  s.finalize();
  Network net(s);
  net.load(pretrained);

  std::vector<PackageRecord> out;
  out.reserve(static_cast<std::size_t>(data.size()));
  for (int i = 0; i < data.size(); ++i) {
    Tensor img = data.image(i);
    std::uint64_t pkg_seed = fnv1a(&i, sizeof(i), seed ^ 0x7061636bull);
    std::vector<Tensor> frames = generate_frames(img, cfg.count, cfg.generator, pkg_seed);

    // one batched forward per package
    Tensor batch({static_cast<int>(frames.size()), img.dim(0), img.dim(1), img.dim(2)});
    for (std::size_t f = 0; f < frames.size(); ++f)
      std::copy(frames[f].data(), frames[f].data() + frames[f].size(),
                batch.data() + static_cast<std::int64_t>(f) * img.size());
    Network::BatchOut fwd = net.forward(batch, false);
    const int C = fwd.logits.dim(1);

    std::vector<SoftLabel> labels;
    LogitVector row(static_cast<std::size_t>(C));
    for (std::size_t f = 0; f < frames.size(); ++f) {
      for (int c = 0; c < C; ++c)
        row[static_cast<std::size_t>(c)] = fwd.logits.at(static_cast<int>(f), c);
      SoftLabel l;
      l.probs = soften(row, 1.0).probs;
      l.uncertainty = normalized_entropy(l.probs);
      labels.push_back(std::move(l));
    }

    std::vector<int> kept = select_reliable_indices(labels, cfg.threshold);
    std::vector<Tensor> kept_frames;
    std::vector<SoftLabel> kept_labels;
    for (int k : kept) {
      kept_frames.push_back(frames[static_cast<std::size_t>(k)]);
      kept_labels.push_back(labels[static_cast<std::size_t>(k)]);
    }
    LabelPackage pkg = aggregate_package(kept_frames, kept_labels, cfg.scheme);

    PackageRecord rec;
    rec.source_id = "src_" + std::to_string(i);
    rec.source_index = i;
    rec.true_label = data.labels[static_cast<std::size_t>(i)];
    rec.seed = pkg_seed;
    rec.frame_count = cfg.count;
    rec.scheme = weight_scheme_name(cfg.scheme);
    rec.params = cfg.generator.params;
    rec.kept = kept;
    rec.labels = kept_labels;
    rec.weights = pkg.weights;
    rec.aggregated = pkg.aggregated;
    out.push_back(std::move(rec));
  }
  return out;
}

Dataset packages_to_dataset(const Dataset& source, const std::vector<PackageRecord>& records) {
  Dataset d;
  d.num_classes = source.num_classes;
  const int C = source.images.dim(1), H = source.images.dim(2), W = source.images.dim(3);
  d.images = Tensor({static_cast<int>(records.size()), C, H, W});
  const std::int64_t per = static_cast<std::int64_t>(C) * H * W;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const PackageRecord& r = records[i];
    if (r.source_index < 0 || r.source_index >= source.size())
      throw InputError("package record points outside the source dataset");
    std::copy(source.images.data() + r.source_index * per,
              source.images.data() + (r.source_index + 1) * per,
              d.images.data() + static_cast<std::int64_t>(i) * per);
    d.labels.push_back(r.true_label);
    d.soft_labels.push_back(r.aggregated.probs);
  }
  return d;
}

}  // namespace stagekd
