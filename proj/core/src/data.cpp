#include "stagekd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "stagekd/errors.hpp"

namespace stagekd {

namespace fs = std::filesystem;

Target Dataset::target(int i) const {
  if (!soft_labels.empty()) return Target::of_soft(soft_labels[static_cast<std::size_t>(i)]);
  return Target::of(labels[static_cast<std::size_t>(i)]);
}

Tensor Dataset::image(int i) const {
  const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
  Tensor out({C, H, W});
  const double* src = images.data() + static_cast<std::int64_t>(i) * C * H * W;
  std::copy(src, src + static_cast<std::int64_t>(C) * H * W, out.data());
  return out;
}

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Base pattern value in [0,1] for class `cls` at pixel (x, y).
double pattern_value(int cls, double x, double y, int size, const double* p) {
  // p: per-sample pattern parameters drawn once (period, phase, cx, cy, r, ...)
  const double period = p[0], phase = p[1];
  const double cx = p[2], cy = p[3], radius = p[4], thick = p[5], angle = p[6];
  switch (cls % 8) {
    case 0:  // horizontal stripes
      return std::cos(2.0 * M_PI * (y + phase) / period) > 0.0 ? 1.0 : 0.0;
    case 1:  // vertical stripes
      return std::cos(2.0 * M_PI * (x + phase) / period) > 0.0 ? 1.0 : 0.0;
    case 2:  // diagonal stripes (/)
      return std::cos(2.0 * M_PI * (x + y + phase) / period) > 0.0 ? 1.0 : 0.0;
    case 3:  // diagonal stripes (\)
      return std::cos(2.0 * M_PI * (x - y + phase) / period) > 0.0 ? 1.0 : 0.0;
    case 4: {  // filled disk
      double d = std::hypot(x - cx, y - cy);
      return d <= radius ? 1.0 : 0.0;
    }
    case 5: {  // ring
      double d = std::hypot(x - cx, y - cy);
      return std::abs(d - radius) <= thick ? 1.0 : 0.0;
    }
    case 6: {  // checkerboard
      int cell = std::max(2, static_cast<int>(period * 0.5));
      int qx = static_cast<int>(std::floor((x + phase) / cell));
      int qy = static_cast<int>(std::floor((y + phase) / cell));
      return ((qx + qy) & 1) ? 1.0 : 0.0;
    }
    default: {  // linear gradient
      double dx = std::cos(angle), dy = std::sin(angle);
      double t = ((x - size * 0.5) * dx + (y - size * 0.5) * dy) / size + 0.5;
      return clamp01(t);
    }
  }
}

void render_sample(double* out, int cls, int size, double noise, double jitter, Rng& rng) {
  double params[7];
  params[0] = 3.0 + jitter * rng.uniform(0.0, 3.5);              // period
  params[1] = rng.uniform(0.0, params[0]);                       // phase
  params[2] = size * 0.5 + jitter * rng.uniform(-3.0, 3.0);      // cx
  params[3] = size * 0.5 + jitter * rng.uniform(-3.0, 3.0);      // cy
  params[4] = size * (0.20 + jitter * rng.uniform(0.0, 0.15));   // radius
  params[5] = 1.0 + jitter * rng.uniform(0.0, 1.0);              // ring thickness
  params[6] = rng.uniform(0.0, 2.0 * M_PI);                      // gradient angle

  // foreground/background colors with enough separation to stay learnable
  double fg[3], bg[3];
  for (;;) {
    double sep = 0.0;
    for (int c = 0; c < 3; ++c) {
      fg[c] = rng.uniform(0.0, 1.0);
      bg[c] = rng.uniform(0.0, 1.0);
      sep += std::abs(fg[c] - bg[c]);
    }
    if (sep >= 0.8) break;
  }

  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double v = pattern_value(cls, x, y, size, params);
      for (int c = 0; c < 3; ++c) {
        double pix = bg[c] + (fg[c] - bg[c]) * v + rng.normal(0.0, noise);
        out[(static_cast<std::int64_t>(c) * size + y) * size + x] = clamp01(pix);
      }
    }
}

std::uint64_t sample_seed(std::uint64_t seed, const std::string& split, int index) {
  std::uint64_t h = fnv1a(split.data(), split.size(), seed ^ 0x5851f42d4c957f2dull);
  h = fnv1a(&index, sizeof(index), h);
  return h;
}

}  // namespace

Dataset make_synthetic(const DataConfig& cfg, const std::string& split, std::uint64_t seed) {
  if (cfg.classes < 2 || cfg.classes > 8)
    throw ConfigError("synthetic dataset supports 2..8 classes");
  if (cfg.image_size < 8) throw ConfigError("synthetic image size must be >= 8");
  int n = cfg.train_size;
  if (split == "val") n = cfg.val_size;
  if (split == "test") n = cfg.test_size;
  if (n < 1) throw ConfigError("dataset split size must be >= 1");

  Dataset d;
  d.num_classes = cfg.classes;
  d.images = Tensor({n, 3, cfg.image_size, cfg.image_size});
  d.labels.resize(static_cast<std::size_t>(n));
  const std::int64_t per = static_cast<std::int64_t>(3) * cfg.image_size * cfg.image_size;
  for (int i = 0; i < n; ++i) {
    Rng rng(sample_seed(seed, split, i));
    int cls = i % cfg.classes;  // balanced splits
    d.labels[static_cast<std::size_t>(i)] = cls;
    render_sample(d.images.data() + i * per, cls, cfg.image_size, cfg.noise, cfg.jitter, rng);
  }
  return d;
}

Dataset load_image_folder(const std::string& root, const std::string& split,
                          int expect_channels) {
  fs::path base = fs::path(root) / split;
  if (!fs::is_directory(base)) throw IoError("dataset split directory missing: " + base.string());

  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(base))
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() < 2) throw IoError("image folder needs at least 2 class directories");

  std::vector<Tensor> imgs;
  std::vector<int> labels;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(base / class_dirs[c]))
      if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Tensor img = load_ppm(f);
      if (img.dim(0) != expect_channels)
        throw IoError("unexpected channel count in " + f);
      if (!imgs.empty() && !img.same_shape(imgs.front()))
        throw IoError("inconsistent image size in " + f);
      imgs.push_back(std::move(img));
      labels.push_back(static_cast<int>(c));
    }
  }
  if (imgs.empty()) throw IoError("no images found under " + base.string());

  Dataset d;
  d.num_classes = static_cast<int>(class_dirs.size());
  const int C = imgs[0].dim(0), H = imgs[0].dim(1), W = imgs[0].dim(2);
  d.images = Tensor({static_cast<int>(imgs.size()), C, H, W});
  for (std::size_t i = 0; i < imgs.size(); ++i)
    std::copy(imgs[i].data(), imgs[i].data() + imgs[i].size(),
              d.images.data() + static_cast<std::int64_t>(i) * C * H * W);
  d.labels = std::move(labels);
  return d;
}

Dataset load_dataset(const DataConfig& cfg, const std::string& split, std::uint64_t seed) {
  if (cfg.kind == "synthetic") return make_synthetic(cfg, split, seed);
  if (cfg.kind == "folder") return load_image_folder(cfg.root, split);
  throw ConfigError("unknown dataset kind: " + cfg.kind);
}

Tensor augment_batch(const Tensor& batch, int pad, Rng& rng) {
  if (pad <= 0) return batch;
  const int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  Tensor out(batch.shape());
  for (int i = 0; i < N; ++i) {
    int dy = rng.uniform_int(0, 2 * pad);
    int dx = rng.uniform_int(0, 2 * pad);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y) {
        int sy = y + dy - pad;
        for (int x = 0; x < W; ++x) {
          int sx = x + dx - pad;
          double v = 0.0;
          if (sy >= 0 && sy < H && sx >= 0 && sx < W) v = batch.at(i, c, sy, sx);
          out.at(i, c, y, x) = v;
        }
      }
  }
  return out;
}

void save_ppm(const std::string& path, const Tensor& chw) {
  if (chw.ndim() != 3) throw InputError("save_ppm: expected C×H×W");
  const int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  if (C != 1 && C != 3) throw InputError("save_ppm: 1 or 3 channels only");
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write image: " + path);
  os << (C == 3 ? "P6" : "P5") << "\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(W) * C);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double v = clamp01(chw.at(c, y, x));
        row[static_cast<std::size_t>(x) * C + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

Tensor load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6" && magic != "P5") throw IoError("unsupported image format in " + path);
  int C = magic == "P6" ? 3 : 1;

  auto next_int = [&]() {
    // skip whitespace and '#' comment lines
    for (;;) {
      int ch = is.peek();
      if (ch == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(ch)) {
        is.get();
      } else {
        break;
      }
    }
    int v;
    is >> v;
    return v;
  };
  int W = next_int(), H = next_int(), maxval = next_int();
  if (W < 1 || H < 1 || maxval != 255) throw IoError("unsupported PPM header in " + path);
  is.get();  // single whitespace after header

  std::vector<unsigned char> raw(static_cast<std::size_t>(W) * H * C);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!is) throw IoError("truncated image: " + path);

  Tensor out({C, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        out.at(c, y, x) = raw[(static_cast<std::size_t>(y) * W + x) * C + c] / 255.0;
  return out;
}

void export_image_folder(const Dataset& data, const std::string& root,
                         const std::string& split) {
  char name[64];
  for (int i = 0; i < data.size(); ++i) {
    int cls = data.labels[static_cast<std::size_t>(i)];
    std::snprintf(name, sizeof(name), "img_%06d.ppm", i);
    fs::path p = fs::path(root) / split / ("class_" + std::to_string(cls)) / name;
    save_ppm(p.string(), data.image(i));
  }
}

}  // namespace stagekd
