#include "snr/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>
#include <zlib.h>

#include "snr/snrt.hpp"

namespace snr {

using Json = nlohmann::json;

void StyleDomainSpec::validate() const {
  for (const StyleRange& g : gain)
    if (g.lo <= 0 || g.hi < g.lo) throw std::invalid_argument("StyleDomainSpec: gains must be positive ranges");
  for (const StyleRange& b : bias)
    if (b.hi < b.lo) throw std::invalid_argument("StyleDomainSpec: bad bias range");
  if (gamma.lo < 0.3 || gamma.hi > 3.0 || gamma.hi < gamma.lo)
    throw std::invalid_argument("StyleDomainSpec: gamma must lie in [0.3, 3]");
  if (saturation.lo < 0 || saturation.hi > 1 || saturation.hi < saturation.lo)
    throw std::invalid_argument("StyleDomainSpec: saturation blend must lie in [0, 1]");
  if (contrast.lo <= 0 || contrast.hi < contrast.lo)
    throw std::invalid_argument("StyleDomainSpec: contrast must be a positive range");
  if (noise_std < 0) throw std::invalid_argument("StyleDomainSpec: negative noise std");
}

StyleParams draw_style(const StyleDomainSpec& domain, std::uint64_t instance_seed) {
  domain.validate();
  std::mt19937_64 rng(mix_seed(domain.seed, instance_seed));
  StyleParams p;
  for (int ch = 0; ch < 3; ++ch) p.gain[static_cast<std::size_t>(ch)] = domain.gain[static_cast<std::size_t>(ch)].draw(rng);
  for (int ch = 0; ch < 3; ++ch) p.bias[static_cast<std::size_t>(ch)] = domain.bias[static_cast<std::size_t>(ch)].draw(rng);
  p.gamma = domain.gamma.draw(rng);
  p.contrast = domain.contrast.draw(rng);
  p.saturation = domain.saturation.draw(rng);
  p.noise_std = domain.noise_std;
  p.noise_seed = rng();
  return p;
}

namespace {

struct Rgb {
  double r = 0, g = 0, b = 0;
};

Rgb draw_color(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Rgb c;
  c.r = d(rng);
  c.g = d(rng);
  c.b = d(rng);
  return c;
}

void mix(Rgb& base, const Rgb& top, double t) {
  base.r += (top.r - base.r) * t;
  base.g += (top.g - base.g) * t;
  base.b += (top.b - base.b) * t;
}

}  // namespace

Tensor4<float> render_identity(const IdentitySpec& spec, std::uint64_t instance_seed, int h, int w) {
  if (h < 1 || w < 1) throw std::invalid_argument("render_identity: empty image");
  std::mt19937_64 id_rng(spec.pattern_seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  // Identity-fixed layout, drawn in a fixed order.
  const Rgb bg = draw_color(id_rng, 0.25, 0.75);
  const Rgb torso = draw_color(id_rng, 0.1, 0.9);
  const Rgb legs = draw_color(id_rng, 0.1, 0.9);
  const double torso_top = 0.25 + 0.15 * u01(id_rng);
  const double torso_bot = torso_top + 0.18 + 0.12 * u01(id_rng);
  const double leg_split = 0.62 + 0.13 * u01(id_rng);
  struct Blob {
    double cx, cy, r;
    Rgb color;
  };
  Blob blobs[2];
  blobs[0] = {0.25 + 0.5 * u01(id_rng), 0.10 + 0.35 * u01(id_rng), 0.06 + 0.10 * u01(id_rng),
              draw_color(id_rng, 0.1, 0.9)};
  blobs[1] = {0.25 + 0.5 * u01(id_rng), 0.50 + 0.35 * u01(id_rng), 0.06 + 0.10 * u01(id_rng),
              draw_color(id_rng, 0.1, 0.9)};
  const double stripe_angle = 3.14159265358979323846 * u01(id_rng);
  const double stripe_freq = 2.0 + 5.0 * u01(id_rng);
  const double stripe_phase = 6.28318530717958647692 * u01(id_rng);
  const double stripe_amp = 0.08 + 0.17 * u01(id_rng);
  const double stripe_wt[3] = {u01(id_rng), u01(id_rng), u01(id_rng)};

  std::mt19937_64 inst_rng(mix_seed(spec.pattern_seed, instance_seed));
  std::uniform_real_distribution<double> uj(-1.0, 1.0);
  const double dx = spec.jitter_translate * uj(inst_rng);
  const double dy = spec.jitter_translate * uj(inst_rng);
  const double sc = 1.0 + spec.jitter_scale * uj(inst_rng);

  const double sa = std::sin(stripe_angle), ca = std::cos(stripe_angle);
  Tensor4<float> img(1, 3, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) / w;
      const double v = (y + 0.5) / h;
      const double uu = 0.5 + (u - 0.5 - dx) / sc;
      const double vv = 0.5 + (v - 0.5 - dy) / sc;
      Rgb c = bg;
      if (vv >= torso_top && vv < torso_bot) mix(c, torso, 0.85);
      if (vv >= leg_split) mix(c, legs, 0.85);
      for (const Blob& bl : blobs) {
        const double d2 = (uu - bl.cx) * (uu - bl.cx) + (vv - bl.cy) * (vv - bl.cy);
        mix(c, bl.color, 0.9 * std::exp(-d2 / (bl.r * bl.r)));
      }
      const double s = stripe_amp * std::sin(6.28318530717958647692 * stripe_freq * (uu * sa + vv * ca) + stripe_phase);
      c.r += s * stripe_wt[0];
      c.g += s * stripe_wt[1];
      c.b += s * stripe_wt[2];
      img(0, 0, y, x) = static_cast<float>(std::clamp(c.r, 0.0, 1.0));
      img(0, 1, y, x) = static_cast<float>(std::clamp(c.g, 0.0, 1.0));
      img(0, 2, y, x) = static_cast<float>(std::clamp(c.b, 0.0, 1.0));
    }
  }
  return img;
}

Tensor4<float> apply_style(const Tensor4<float>& image, const StyleParams& p) {
  if (image.n != 1 || image.c != 3) throw std::invalid_argument("apply_style: expects a (1,3,h,w) image");
  for (Index i = 0; i < image.count(); ++i)
    if (image.data[i] < 0.0f || image.data[i] > 1.0f)
      throw std::invalid_argument("apply_style: pixel values must lie in [0, 1]");
  const Index hw = image.h * image.w;
  Tensor4<float> out(1, 3, image.h, image.w);

  double total = 0;
  for (Index j = 0; j < hw; ++j) {
    const double gray =
        (static_cast<double>(image.data[j]) + static_cast<double>(image.data[hw + j]) +
         static_cast<double>(image.data[2 * hw + j])) /
        3.0;
    for (int ch = 0; ch < 3; ++ch) {
      const double x = static_cast<double>(image.data[ch * hw + j]);
      double v = p.saturation * gray +
                 (1.0 - p.saturation) * (p.gain[static_cast<std::size_t>(ch)] * x + p.bias[static_cast<std::size_t>(ch)]);
      v = std::clamp(v, 0.0, 1.0);
      v = std::pow(v, p.gamma);
      out.data[ch * hw + j] = static_cast<float>(v);
      total += v;
    }
  }
  const double mean = total / static_cast<double>(3 * hw);
  std::mt19937_64 noise_rng(p.noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (Index i = 0; i < out.count(); ++i) {
    double v = mean + p.contrast * (static_cast<double>(out.data[i]) - mean);
    if (p.noise_std > 0) v += p.noise_std * noise(noise_rng);
    out.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

Tensor4<float> apply_style(const Tensor4<float>& image, const StyleDomainSpec& domain, std::uint64_t instance_seed) {
  return apply_style(image, draw_style(domain, instance_seed));
}

// ---------------------------------------------------------------------------
// Manifest

void DatasetManifest::save(const std::filesystem::path& file) const {
  std::ofstream f(file, std::ios::trunc);
  if (!f) throw std::runtime_error("manifest: cannot write " + file.string());
  for (const SampleRecord& s : samples) {
    Json j{{"path", s.path}, {"identity", s.identity}, {"domain", s.domain}, {"split", s.split}, {"seed", s.seed}};
    f << j.dump() << "\n";
  }
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& file) {
  std::ifstream f(file);
  if (!f) throw std::runtime_error("manifest: cannot open " + file.string());
  DatasetManifest m;
  m.base_dir = file.parent_path();
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    Json j = Json::parse(line);
    SampleRecord s;
    s.path = j.at("path").get<std::string>();
    s.identity = j.at("identity").get<int>();
    s.domain = j.at("domain").get<int>();
    s.split = j.at("split").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    m.samples.push_back(std::move(s));
  }
  if (m.samples.empty()) throw std::runtime_error("manifest: empty " + file.string());
  return m;
}

std::vector<Index> DatasetManifest::split_indices(const std::string& split) const {
  std::vector<Index> out;
  for (Index i = 0; i < static_cast<Index>(samples.size()); ++i)
    if (samples[static_cast<std::size_t>(i)].split == split) out.push_back(i);
  return out;
}

std::vector<Index> DatasetManifest::domain_indices(int domain) const {
  std::vector<Index> out;
  for (Index i = 0; i < static_cast<Index>(samples.size()); ++i)
    if (samples[static_cast<std::size_t>(i)].domain == domain) out.push_back(i);
  return out;
}

std::vector<Index> DatasetManifest::query_indices(int domain) const {
  std::vector<Index> out;
  for (Index i = 0; i < static_cast<Index>(samples.size()); ++i) {
    const SampleRecord& s = samples[static_cast<std::size_t>(i)];
    if (s.domain == domain && s.split == "query") out.push_back(i);
  }
  return out;
}

std::vector<Index> DatasetManifest::gallery_indices(int domain) const {
  std::vector<Index> out;
  for (Index i = 0; i < static_cast<Index>(samples.size()); ++i) {
    const SampleRecord& s = samples[static_cast<std::size_t>(i)];
    if (s.domain == domain && s.split == "gallery") out.push_back(i);
  }
  return out;
}

std::vector<int> DatasetManifest::sorted_train_identities() const {
  std::set<int> ids;
  for (const SampleRecord& s : samples)
    if (s.split == "train") ids.insert(s.identity);
  return {ids.begin(), ids.end()};
}

Tensor4<float> DatasetManifest::load_image(Index sample) const {
  if (sample < 0 || sample >= static_cast<Index>(samples.size()))
    throw std::invalid_argument("manifest: sample index out of range");
  SnrtTensor raw = read_snrt(base_dir / samples[static_cast<std::size_t>(sample)].path);
  if (raw.extents.size() != 3) throw std::runtime_error("manifest: image payload must be rank 3");
  Tensor4<float> img(1, raw.extents[0], raw.extents[1], raw.extents[2]);
  std::copy(raw.payload.begin(), raw.payload.end(), img.data.data());
  return img;
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const SampleRecord& s : samples) {
    if (s.split != "train" && s.split != "query" && s.split != "gallery")
      throw std::runtime_error("manifest: unknown split tag " + s.split);
    if (!seen.insert(s.path).second) throw std::runtime_error("manifest: duplicate sample path " + s.path);
  }
  std::set<int> domains;
  for (const SampleRecord& s : samples) domains.insert(s.domain);
  for (int d : domains) {
    std::set<int> gallery_ids;
    for (const SampleRecord& s : samples)
      if (s.domain == d && s.split == "gallery") gallery_ids.insert(s.identity);
    for (const SampleRecord& s : samples)
      if (s.domain == d && s.split == "query" && gallery_ids.count(s.identity) == 0)
        throw std::runtime_error("manifest: query identity missing from gallery in domain " + std::to_string(d));
  }
}

// ---------------------------------------------------------------------------
// Generator

void GenSpec::validate() const {
  if (num_identities < 2) throw std::invalid_argument("GenSpec: need at least 2 identities");
  if (instances_per_domain < 2) throw std::invalid_argument("GenSpec: need at least 2 instances per identity");
  if (height < 4 || width < 4) throw std::invalid_argument("GenSpec: image too small");
  if (domains.empty()) throw std::invalid_argument("GenSpec: no domains");
  std::set<int> ids;
  for (const StyleDomainSpec& d : domains) {
    d.validate();
    if (!ids.insert(d.domain_id).second) throw std::invalid_argument("GenSpec: duplicate domain id");
  }
}

DatasetManifest generate_synthetic_domains(const GenSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (!std::filesystem::is_directory(out_dir))
    throw std::runtime_error("generate: cannot create output directory " + out_dir.string());

  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  for (const StyleDomainSpec& domain : spec.domains) {
    const std::filesystem::path ddir = out_dir / ("domain_" + std::to_string(domain.domain_id));
    std::filesystem::create_directories(ddir);
    for (int id = 0; id < spec.num_identities; ++id) {
      IdentitySpec ident;
      ident.identity_id = id;
      ident.pattern_seed = mix_seed(spec.seed, 0x1d000000ull + static_cast<std::uint64_t>(id));
      ident.jitter_translate = spec.jitter_translate;
      ident.jitter_scale = spec.jitter_scale;
      for (int k = 0; k < spec.instances_per_domain; ++k) {
        const std::uint64_t instance_seed =
            mix_seed(mix_seed(spec.seed, 0xd0000000ull + static_cast<std::uint64_t>(domain.domain_id)),
                     static_cast<std::uint64_t>(id) * 1000003ull + static_cast<std::uint64_t>(k));
        Tensor4<float> img = apply_style(render_identity(ident, instance_seed, spec.height, spec.width), domain,
                                         instance_seed);
        const std::string rel = "domain_" + std::to_string(domain.domain_id) + "/id_" + std::to_string(id) + "_" +
                                std::to_string(k) + ".snrt";
        SnrtTensor payload;
        payload.extents = {img.c, img.h, img.w};
        payload.payload.assign(img.data.data(), img.data.data() + img.count());
        write_snrt(out_dir / rel, payload);
        if (spec.png_preview) {
          std::filesystem::path png = out_dir / rel;
          png.replace_extension(".png");
          write_png_rgb(png, img);
        }
        SampleRecord rec;
        rec.path = rel;
        rec.identity = id;
        rec.domain = domain.domain_id;
        rec.split = domain.held_out ? (k == 0 ? "query" : "gallery") : "train";
        rec.seed = instance_seed;
        manifest.samples.push_back(std::move(rec));
      }
    }
  }
  manifest.validate();
  manifest.save(out_dir / "manifest.jsonl");
  return manifest;
}

// ---------------------------------------------------------------------------
// P x K sampler

PkSampler::PkSampler(const DatasetManifest& manifest, int p, int k, std::uint64_t seed)
    : manifest_(&manifest), p_(p), k_(k), rng_(mix_seed(seed, 0x70bull)) {
  if (p < 1 || k < 1) throw std::invalid_argument("PkSampler: P and K must be positive");
  identities_ = manifest.sorted_train_identities();
  if (static_cast<int>(identities_.size()) < p)
    throw std::invalid_argument("PkSampler: train split has fewer than P identities");
  by_identity_.resize(identities_.size());
  for (Index i = 0; i < static_cast<Index>(manifest.samples.size()); ++i) {
    const SampleRecord& s = manifest.samples[static_cast<std::size_t>(i)];
    if (s.split != "train") continue;
    const auto it = std::lower_bound(identities_.begin(), identities_.end(), s.identity);
    by_identity_[static_cast<std::size_t>(it - identities_.begin())].push_back(i);
  }
}

std::vector<Index> PkSampler::next() {
  std::vector<std::size_t> order(identities_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng_);
  std::vector<Index> batch;
  batch.reserve(static_cast<std::size_t>(p_ * k_));
  for (int pi = 0; pi < p_; ++pi) {
    const std::vector<Index>& pool = by_identity_[order[static_cast<std::size_t>(pi)]];
    if (static_cast<int>(pool.size()) >= k_) {
      std::vector<Index> local = pool;
      std::shuffle(local.begin(), local.end(), rng_);
      batch.insert(batch.end(), local.begin(), local.begin() + k_);
    } else {
      std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
      for (int ki = 0; ki < k_; ++ki) batch.push_back(pool[d(rng_)]);
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// PNG preview

namespace {

void put_be32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

void put_chunk(std::string& out, const char type[5], const std::string& body) {
  put_be32(out, static_cast<std::uint32_t>(body.size()));
  std::string block = std::string(type, 4) + body;
  out += block;
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(block.data()), static_cast<uInt>(block.size()));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_png_rgb(const std::filesystem::path& path, const Tensor4<float>& image) {
  if (image.n != 1 || image.c != 3) throw std::invalid_argument("write_png_rgb: expects a (1,3,h,w) image");
  const Index h = image.h, w = image.w, hw = h * w;
  std::string raw;
  raw.reserve(static_cast<std::size_t>(h * (1 + 3 * w)));
  for (Index y = 0; y < h; ++y) {
    raw.push_back(0);  // filter type 0
    for (Index x = 0; x < w; ++x)
      for (Index ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(image.data[ch * hw + y * w + x], 0.0f, 1.0f);
        raw.push_back(static_cast<char>(static_cast<int>(v * 255.0f + 0.5f)));
      }
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string deflated(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(deflated.data()), &bound, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw std::runtime_error("write_png_rgb: deflate failed");
  deflated.resize(bound);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(w));
  put_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type RGB
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", deflated);
  put_chunk(png, "IEND", "");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_png_rgb: cannot open " + path.string());
  f.write(png.data(), static_cast<std::streamsize>(png.size()));
}

}  // namespace snr
