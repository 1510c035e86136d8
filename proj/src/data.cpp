#include "lens/data.hpp"

#include <algorithm>
#include <array>
#include <limits>

#include "lens/errors.hpp"
#include "lens/io.hpp"
#include "lens/rng.hpp"

namespace lens {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::uint64_t kCorruptTag = 0xC0AA;

constexpr std::array<double, 5> kNoiseStd{0.3, 0.6, 1.0, 1.5, 2.2};
constexpr std::array<double, 5> kBlurRadius{1, 2, 3, 4, 5};
constexpr std::array<double, 5> kContrast{0.75, 0.5, 0.35, 0.2, 0.1};
constexpr std::array<double, 5> kDropout{0.1, 0.2, 0.35, 0.5, 0.7};

Dataset sample_around(const Tensor<float>& templates, const SyntheticSpec& spec, std::size_t first_index,
                      std::size_t count, std::uint64_t seed) {
  const std::size_t c = templates.dim(0);
  const std::size_t pixels = templates.numel() / c;
  Dataset out;
  out.num_classes = c;
  out.images = Tensor<float>(Shape{count, spec.image_size, spec.image_size, spec.channels});
  out.labels.resize(count);
  for (std::size_t n = 0; n < count; ++n) {
    CounterRng rng = CounterRng(seed).fork(first_index + n);
    const auto label = static_cast<std::size_t>(rng.below(c));
    out.labels[n] = static_cast<int>(label);
    const float* tmpl = templates.raw() + label * pixels;
    float* dst = out.images.raw() + n * pixels;
    for (std::size_t p = 0; p < pixels; ++p) {
      dst[p] = tmpl[p] + static_cast<float>(spec.noise_std * rng.normal());
    }
  }
  return out;
}

}  // namespace

Tensor<float> Dataset::gather_images(std::span<const std::size_t> indices) const {
  const std::size_t pixels = height() * width() * channels();
  Tensor<float> out(Shape{indices.size(), height(), width(), channels()});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw IndexError("sample index " + std::to_string(indices[k]) + " out of range");
    std::copy_n(images.raw() + indices[k] * pixels, pixels, out.raw() + k * pixels);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) out[k] = labels.at(indices[k]);
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw IndexError("dataset slice out of range");
  std::vector<std::size_t> idx(count);
  for (std::size_t k = 0; k < count; ++k) idx[k] = begin + k;
  return Dataset{gather_images(idx), gather_labels(idx), num_classes};
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

Tensor<float> class_templates(const SyntheticSpec& spec, std::uint64_t template_seed) {
  Tensor<float> t(Shape{spec.num_classes, spec.image_size, spec.image_size, spec.channels});
  CounterRng rng(template_seed);
  for (auto& v : t.data()) v = static_cast<float>(spec.template_scale * rng.normal());
  return t;
}

Dataset gen_synthetic(const SyntheticSpec& spec, Split split, std::uint64_t seed) {
  if (spec.num_classes < 2 || spec.image_size == 0 || spec.channels == 0) {
    throw ConfigError("synthetic spec needs at least 2 classes and a nonempty geometry");
  }
  if (spec.noise_std < 0.0) throw ConfigError("noise_std must be nonnegative");
  const auto templates = class_templates(spec, spec.template_seed);
  if (split == Split::train) return sample_around(templates, spec, 0, spec.train_samples, seed);
  return sample_around(templates, spec, spec.train_samples, spec.test_samples, seed);
}

Dataset gen_ood(const SyntheticSpec& spec, std::size_t count, std::uint64_t seed) {
  if (spec.ood_template_seed == spec.template_seed) {
    throw ConfigError("ood_template_seed must differ from template_seed");
  }
  const auto templates = class_templates(spec, spec.ood_template_seed);
  return sample_around(templates, spec, 0, count, CounterRng(seed).fork(0x00D).key());
}

std::string to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise:
      return "gaussian_noise";
    case CorruptionKind::blur:
      return "blur";
    case CorruptionKind::contrast:
      return "contrast";
    case CorruptionKind::pixel_dropout:
      return "pixel_dropout";
  }
  return "unknown";
}

CorruptionKind parse_corruption(const std::string& name) {
  for (auto k : kCorruptionKinds) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown corruption kind '" + name + "'");
}

double corruption_magnitude(CorruptionKind kind, int severity) {
  if (severity < 0 || severity > 5) throw ConfigError("severity must lie in 0..5, got " + std::to_string(severity));
  if (severity == 0) {
    return kind == CorruptionKind::contrast ? 1.0 : 0.0;
  }
  const auto s = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case CorruptionKind::gaussian_noise:
      return kNoiseStd[s];
    case CorruptionKind::blur:
      return kBlurRadius[s];
    case CorruptionKind::contrast:
      return kContrast[s];
    case CorruptionKind::pixel_dropout:
      return kDropout[s];
  }
  throw ConfigError("unknown corruption kind");
}

Tensor<float> corrupt(const Tensor<float>& images, const CorruptionSpec& spec, std::uint64_t seed) {
  if (images.rank() != 4) throw DimensionError("corrupt expects [N,H,W,ch], got " + shape_string(images.shape()));
  const double mag = corruption_magnitude(spec.kind, spec.severity);
  if (spec.severity == 0) return images;
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), ch = images.dim(3);
  const std::size_t pixels = h * w * ch;
  Tensor<float> out = images;
  CounterRng rng = CounterRng(seed).fork(kCorruptTag);
  switch (spec.kind) {
    case CorruptionKind::gaussian_noise:
      for (auto& v : out.data()) v += static_cast<float>(mag * rng.normal());
      break;
    case CorruptionKind::blur: {
      // Box mean over the in-bounds part of a (2r+1)^2 window.
      const auto r = static_cast<std::ptrdiff_t>(mag);
      for (std::size_t b = 0; b < n; ++b) {
        const float* src = images.raw() + b * pixels;
        float* dst = out.raw() + b * pixels;
        for (std::ptrdiff_t y = 0; y < static_cast<std::ptrdiff_t>(h); ++y) {
          for (std::ptrdiff_t x = 0; x < static_cast<std::ptrdiff_t>(w); ++x) {
            for (std::size_t c = 0; c < ch; ++c) {
              double acc = 0.0;
              int cnt = 0;
              for (auto yy = std::max<std::ptrdiff_t>(0, y - r); yy <= std::min<std::ptrdiff_t>(h - 1, y + r); ++yy) {
                for (auto xx = std::max<std::ptrdiff_t>(0, x - r); xx <= std::min<std::ptrdiff_t>(w - 1, x + r); ++xx) {
                  acc += src[(yy * w + xx) * ch + c];
                  ++cnt;
                }
              }
              dst[(y * w + x) * ch + c] = static_cast<float>(acc / cnt);
            }
          }
        }
      }
      break;
    }
    case CorruptionKind::contrast:
      for (std::size_t b = 0; b < n; ++b) {
        float* img = out.raw() + b * pixels;
        double mean = 0.0;
        for (std::size_t p = 0; p < pixels; ++p) mean += img[p];
        mean /= static_cast<double>(pixels);
        for (std::size_t p = 0; p < pixels; ++p) img[p] = static_cast<float>(mean + (img[p] - mean) * mag);
      }
      break;
    case CorruptionKind::pixel_dropout:
      for (std::size_t q = 0; q < n * h * w; ++q) {
        if (rng.uniform() < mag) std::fill_n(out.raw() + q * ch, ch, 0.0f);
      }
      break;
  }
  return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  if (data.images.rank() != 4 || data.images.dim(0) != data.size()) {
    throw DimensionError("dataset images must be [N,H,W,ch] with N = label count");
  }
  if (data.num_classes > std::numeric_limits<std::uint16_t>::max() + 1u) {
    throw ConfigError("too many classes for u16 labels");
  }
  ByteWriter w;
  w.bytes("LDS1");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(static_cast<std::uint32_t>(data.height()));
  w.u32(static_cast<std::uint32_t>(data.width()));
  w.u32(static_cast<std::uint32_t>(data.channels()));
  w.u32(static_cast<std::uint32_t>(data.num_classes));
  for (float v : data.images.data()) w.f32(v);
  for (int y : data.labels) w.u16(static_cast<std::uint16_t>(y));
  write_file_atomic(path, w.str());
}

Dataset load_dataset(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != "LDS1") throw ConfigError(path.string() + " is not an LDS1 dataset");
  if (const auto v = r.u32(); v != kDatasetVersion) {
    throw ConfigError("unsupported dataset version " + std::to_string(v));
  }
  const std::size_t n = r.u32(), h = r.u32(), w = r.u32(), ch = r.u32(), c = r.u32();
  if (n == 0 || h == 0 || w == 0 || ch == 0 || c < 2) throw ConfigError(path.string() + ": invalid dataset header");
  if (r.remaining() != n * h * w * ch * 4 + n * 2) throw ConfigError(path.string() + ": payload size mismatch");
  Dataset d;
  d.num_classes = c;
  d.images = Tensor<float>(Shape{n, h, w, ch});
  for (auto& v : d.images.data()) v = r.f32();
  d.labels.resize(n);
  for (auto& y : d.labels) {
    y = r.u16();
    if (static_cast<std::size_t>(y) >= c) throw ConfigError(path.string() + ": label out of range");
  }
  return d;
}

}  // namespace lens
