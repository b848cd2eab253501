#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "snr/tensor.hpp"

namespace snr {

struct StyleRange {
  double lo = 0, hi = 0;
  double draw(std::mt19937_64& rng) const {
    if (hi < lo) throw std::invalid_argument("StyleRange: hi < lo");
    if (hi == lo) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
};

// Photometric transform family of one synthetic domain. Ranges are sampled
// per instance from the domain seed.
struct StyleDomainSpec {
  int domain_id = 0;
  bool held_out = false;
  std::array<StyleRange, 3> gain{{{1, 1}, {1, 1}, {1, 1}}};
  std::array<StyleRange, 3> bias{{{0, 0}, {0, 0}, {0, 0}}};
  StyleRange gamma{1, 1};
  StyleRange contrast{1, 1};
  StyleRange saturation{0, 0};  // blend weight toward gray
  double noise_std = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Concrete per-instance draw from a StyleDomainSpec.
struct StyleParams {
  std::array<double, 3> gain{1, 1, 1};
  std::array<double, 3> bias{0, 0, 0};
  double gamma = 1, contrast = 1, saturation = 0, noise_std = 0;
  std::uint64_t noise_seed = 0;
};

StyleParams draw_style(const StyleDomainSpec& domain, std::uint64_t instance_seed);

struct IdentitySpec {
  int identity_id = 0;
  std::uint64_t pattern_seed = 0;
  double jitter_translate = 0.06;  // fraction of image extent
  double jitter_scale = 0.08;      // relative scale range
};

// Renders the identity's base pattern (blobs, bands, stripes at seeded
// positions and colors) with per-instance translation/scale jitter.
// Returns a (1, 3, h, w) image with values in [0, 1].
Tensor4<float> render_identity(const IdentitySpec& spec, std::uint64_t instance_seed, int h, int w);

// out = clamp(blend*gray(x) + (1-blend)*(gain*x + bias))^gamma, contrast-
// scaled about its mean, plus seeded Gaussian noise, clamped to [0, 1].
Tensor4<float> apply_style(const Tensor4<float>& image, const StyleParams& params);
Tensor4<float> apply_style(const Tensor4<float>& image, const StyleDomainSpec& domain, std::uint64_t instance_seed);

struct SampleRecord {
  std::string path;  // relative to the manifest directory
  int identity = 0;
  int domain = 0;
  std::string split;  // train | query | gallery
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::filesystem::path base_dir;
  std::vector<SampleRecord> samples;

  void save(const std::filesystem::path& file) const;  // JSON lines
  static DatasetManifest load(const std::filesystem::path& file);

  std::vector<Index> split_indices(const std::string& split) const;
  std::vector<Index> domain_indices(int domain) const;
  std::vector<Index> query_indices(int domain) const;
  std::vector<Index> gallery_indices(int domain) const;
  std::vector<int> sorted_train_identities() const;
  Tensor4<float> load_image(Index sample) const;

  void validate() const;  // query identities covered by gallery, disjoint samples
};

struct GenSpec {
  std::uint64_t seed = 1;
  int num_identities = 30;
  int instances_per_domain = 8;  // instances per identity per domain
  int height = 64, width = 32;
  double jitter_translate = 0.06;
  double jitter_scale = 0.08;
  bool png_preview = false;
  std::vector<StyleDomainSpec> domains;

  void validate() const;
};

// Writes out_dir/domain_<id>/id_<identity>_<k>.snrt plus manifest.jsonl.
// Source-domain samples land in the train split; held-out domains get one
// query instance per identity, remainder gallery.
DatasetManifest generate_synthetic_domains(const GenSpec& spec, const std::filesystem::path& out_dir);

// Deterministic P-identities-times-K-instances batch stream over the train
// split. Identities with fewer than K instances are sampled with
// replacement.
class PkSampler {
 public:
  PkSampler(const DatasetManifest& manifest, int p, int k, std::uint64_t seed);

  std::vector<Index> next();  // P*K manifest indices
  int batch_size() const { return p_ * k_; }

 private:
  const DatasetManifest* manifest_;
  int p_, k_;
  std::vector<int> identities_;
  std::vector<std::vector<Index>> by_identity_;
  std::mt19937_64 rng_;
};

// 8-bit RGB PNG preview writer (zlib-deflated, one filter-0 scanline per
// row); inspection only, the pipeline reads .snrt payloads.
void write_png_rgb(const std::filesystem::path& path, const Tensor4<float>& image);

}  // namespace snr
