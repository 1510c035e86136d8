#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lens/tensor.hpp"

namespace lens {

/// Images [N, H, W, ch] with integer labels in [0, num_classes).
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.dim(1); }
  std::size_t width() const { return images.dim(2); }
  std::size_t channels() const { return images.dim(3); }

  /// Images of the given sample indices, stacked [k, H, W, ch].
  Tensor<float> gather_images(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  /// Contiguous slice [begin, begin + count).
  Dataset slice(std::size_t begin, std::size_t count) const;
  std::vector<std::size_t> class_counts() const;
};

struct SyntheticSpec {
  std::size_t num_classes = 5;
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t train_samples = 2000;
  std::size_t test_samples = 500;
  std::uint64_t template_seed = 1;
  std::uint64_t ood_template_seed = 2;
  double noise_std = 2.0;
  double template_scale = 1.0;
};

enum class Split { train, test };

/// Per-class templates ~ Normal(0, template_scale^2), [C, H, W, ch].
Tensor<float> class_templates(const SyntheticSpec& spec, std::uint64_t template_seed);

/// Sample n of a split is global index n (train) or train_samples + n (test);
/// its label and noise come from a stream keyed by (seed, global index).
Dataset gen_synthetic(const SyntheticSpec& spec, Split split, std::uint64_t seed);

/// Samples around the templates of `ood_template_seed`; labels index those templates.
Dataset gen_ood(const SyntheticSpec& spec, std::size_t count, std::uint64_t seed);

enum class CorruptionKind { gaussian_noise, blur, contrast, pixel_dropout };
inline constexpr CorruptionKind kCorruptionKinds[] = {CorruptionKind::gaussian_noise, CorruptionKind::blur,
                                                      CorruptionKind::contrast, CorruptionKind::pixel_dropout};

std::string to_string(CorruptionKind k);
CorruptionKind parse_corruption(const std::string& name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;  // 0 is the identity
};

/// Magnitude for (kind, severity): noise std, blur radius, contrast factor or
/// dropout probability.
double corruption_magnitude(CorruptionKind kind, int severity);

/// Applies the corruption to images [N, H, W, ch]. Stochastic kinds draw from `seed`.
Tensor<float> corrupt(const Tensor<float>& images, const CorruptionSpec& spec, std::uint64_t seed);

/// "LDS1" file: magic, u32 version, count, H, W, ch, C, f32 images, u16 labels.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace lens
