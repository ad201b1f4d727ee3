#ifndef STAGEKD_DATA_HPP
#define STAGEKD_DATA_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "stagekd/losses.hpp"
#include "stagekd/tensor.hpp"

namespace stagekd {

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | folder
  std::string root;                // image-folder root for kind=folder
  int classes = 8;
  int image_size = 16;
  int train_size = 1024;
  int val_size = 256;
  int test_size = 1024;
  double noise = 0.18;   // pixel noise stddev
  double jitter = 0.5;   // pattern parameter variability in [0,1]
  bool augment = false;  // pad + random crop during training
  int pad = 2;
};

// In-memory dataset. soft_labels, when non-empty, override the hard labels
// as training targets (package-label training).
struct Dataset {
  Tensor images;  // N×C×H×W, values in [0,1]
  std::vector<int> labels;
  std::vector<std::vector<double>> soft_labels;
  int num_classes = 0;

  int size() const { return images.empty() ? 0 : images.dim(0); }
  Target target(int i) const;
  Tensor image(int i) const;  // C×H×W copy
};

// Procedural 8-class pattern set (stripes at four orientations, disk, ring,
// checkerboard, gradient). Deterministic per (seed, split, index).
Dataset make_synthetic(const DataConfig& cfg, const std::string& split, std::uint64_t seed);

// `<root>/<split>/<class>/<file>` layout; classes ordered lexicographically.
// Files are binary PPM (P6) or PGM (P5).
Dataset load_image_folder(const std::string& root, const std::string& split,
                          int expect_channels = 3);

Dataset load_dataset(const DataConfig& cfg, const std::string& split, std::uint64_t seed);

// Zero-pad by `pad` on each side then crop back at a random offset per
// sample; mirrors the usual small-image training protocol proportionally.
Tensor augment_batch(const Tensor& batch, int pad, Rng& rng);

// Minimal PPM/PGM IO used by the folder reader, dataset export and the
// correlation heatmap renderer.
void save_ppm(const std::string& path, const Tensor& chw);
Tensor load_ppm(const std::string& path);

// Writes the dataset out in the image-folder layout (used by tests and the
// synthetic-to-folder export path).
void export_image_folder(const Dataset& data, const std::string& root,
                         const std::string& split);

}  // namespace stagekd

#endif
