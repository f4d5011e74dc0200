#include "cmt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cmt/png_io.hpp"

namespace fs = std::filesystem;

namespace cmt {

void ImagePair::validate() const {
  const int64_t h = low.dim(0), w = low.dim(1);
  if (gt.dim(0) != h || gt.dim(1) != w)
    throw ShapeError("image pair '" + name + "': low/gt spatial dims differ");
  if (h % 4 != 0 || w % 4 != 0)
    throw ShapeError("image pair '" + name + "': dims " + std::to_string(h) + "x" +
                     std::to_string(w) + " not divisible by 4");
  bundle_low.validate();
  bundle_gt.validate();
  if (bundle_low.height() != h || bundle_low.width() != w || bundle_gt.height() != h ||
      bundle_gt.width() != w)
    throw ShapeError("image pair '" + name + "': bundle spatial dims differ from images");
}

namespace {

TensorF rot90(const TensorF& t) {
  const int64_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
  TensorF out({w, h, c});
  for (int64_t y = 0; y < w; ++y)
    for (int64_t x = 0; x < h; ++x)
      for (int64_t ch = 0; ch < c; ++ch)
        out[(y * h + x) * c + ch] = t[((h - 1 - x) * w + y) * c + ch];
  return out;
}

TensorF flip_h(const TensorF& t) {
  const int64_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
  TensorF out(t.shape());
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < c; ++ch)
        out[(y * w + x) * c + ch] = t[(y * w + (w - 1 - x)) * c + ch];
  return out;
}

}  // namespace

TensorF dihedral_apply(const TensorF& t, int element) {
  if (element < 0 || element > 7) throw UsageError("dihedral element out of range");
  TensorF out = element >= 4 ? flip_h(t) : t.clone();
  for (int k = 0; k < element % 4; ++k) out = rot90(out);
  return out;
}

int dihedral_inverse(int element) {
  if (element < 4) return (4 - element) % 4;
  return element;  // flip-then-rotate reflections are involutions
}

TensorF procedural_image(int64_t h, int64_t w, Rng& rng) {
  TensorF img({h, w, 3});
  // bright base gradient
  float base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = static_cast<float>(rng.uniform(0.5, 0.85));
    gx[c] = static_cast<float>(rng.uniform(-0.25, 0.25));
    gy[c] = static_cast<float>(rng.uniform(-0.25, 0.25));
  }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        img[(y * w + x) * 3 + c] = base[c] +
                                   gx[c] * static_cast<float>(x) / static_cast<float>(w) +
                                   gy[c] * static_cast<float>(y) / static_cast<float>(h);
  // a few solid shapes
  const int shapes = 2 + static_cast<int>(rng.next_below(3));
  for (int s = 0; s < shapes; ++s) {
    float color[3];
    for (float& v : color) v = static_cast<float>(rng.uniform(0.2, 1.0));
    const bool ellipse = rng.uniform() < 0.5;
    const int64_t cx = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(w)));
    const int64_t cy = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(h)));
    const int64_t rx = 2 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(w / 3 + 1)));
    const int64_t ry = 2 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(h / 3 + 1)));
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x - cx) / static_cast<double>(rx);
        const double dy = static_cast<double>(y - cy) / static_cast<double>(ry);
        const bool inside = ellipse ? (dx * dx + dy * dy <= 1.0)
                                    : (std::fabs(dx) <= 1.0 && std::fabs(dy) <= 1.0);
        if (inside)
          for (int64_t c = 0; c < 3; ++c)
            img[(y * w + x) * 3 + c] = 0.75f * color[c] + 0.25f * img[(y * w + x) * 3 + c];
      }
  }
  // sinusoidal texture
  const float fx = static_cast<float>(rng.uniform(0.15, 0.9));
  const float fy = static_cast<float>(rng.uniform(0.15, 0.9));
  const float amp = static_cast<float>(rng.uniform(0.02, 0.08));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const float tex = amp * std::sin(fx * static_cast<float>(x)) *
                        std::cos(fy * static_cast<float>(y));
      for (int64_t c = 0; c < 3; ++c) img[(y * w + x) * 3 + c] += tex;
    }
  for (int64_t i = 0; i < img.size(); ++i) img[i] = std::clamp(img[i], 0.05f, 1.0f);
  return img;
}

DegradeParams severity_params(const std::string& severity, Rng& rng) {
  DegradeParams p;
  if (severity == "low") {
    p.gamma = static_cast<float>(rng.uniform(2.0, 2.5));
    p.gain = static_cast<float>(rng.uniform(0.35, 0.5));
    p.noise_sigma = 0.01f;
    p.color_shift = 0.03f;
  } else if (severity == "med") {
    p.gamma = static_cast<float>(rng.uniform(2.5, 3.5));
    p.gain = static_cast<float>(rng.uniform(0.2, 0.35));
    p.noise_sigma = 0.02f;
    p.color_shift = 0.06f;
  } else if (severity == "high") {
    p.gamma = static_cast<float>(rng.uniform(3.5, 5.0));
    p.gain = static_cast<float>(rng.uniform(0.1, 0.2));
    p.noise_sigma = 0.04f;
    p.color_shift = 0.10f;
  } else {
    throw UsageError("unknown severity '" + severity + "' (expected low|med|high)");
  }
  return p;
}

namespace {

// 8-bit quantization, so in-memory tensors match their PNG round trips and
// bundles extracted now equal bundles extracted from the saved files
TensorF quantize8(const TensorF& img) {
  TensorF out(img.shape());
  for (int64_t i = 0; i < img.size(); ++i) {
    const float v = std::clamp(img[i], 0.0f, 1.0f);
    out[i] = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
  }
  return out;
}

std::string pair_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "img_%04d", index);
  return buf;
}

}  // namespace

void generate_corpus(const GenDataConfig& config, const std::string& out_dir) {
  if (config.height % 8 != 0 || config.width % 8 != 0)
    throw UsageError("gen-data: size must be divisible by 8");
  if (config.count < 1) throw UsageError("gen-data: count must be positive");
  fs::create_directories(out_dir);
  Rng rng(config.seed);
  std::ofstream manifest(fs::path(out_dir) / "dataset.txt");
  if (!manifest) throw DataError("cannot write dataset manifest in " + out_dir);
  const int val_count = config.count >= 2 ? std::max(1, config.count / 4) : 0;
  for (int i = 0; i < config.count; ++i) {
    const std::string stem = pair_stem(i);
    Rng img_rng = rng.fork(static_cast<uint64_t>(i) * 2 + 1);
    TensorF gt = quantize8(procedural_image(config.height, config.width, img_rng));
    DegradeParams params = severity_params(config.severity, img_rng);
    TensorF low = quantize8(degrade(gt, params, img_rng.next_u64()));
    write_png((fs::path(out_dir) / (stem + "_gt.png")).string(), gt);
    write_png((fs::path(out_dir) / (stem + "_low.png")).string(), low);
    const uint64_t bundle_seed = config.seed ^ 0xb0d1e5u;
    save_bundle(extract_bundle(low, bundle_seed), (fs::path(out_dir) / (stem + "_low_bundle")).string());
    save_bundle(extract_bundle(gt, bundle_seed), (fs::path(out_dir) / (stem + "_gt_bundle")).string());
    const bool is_val = i >= config.count - val_count;
    manifest << (is_val ? "val " : "train ") << stem << "\n";
  }
  if (config.count == 1) manifest << "val " << pair_stem(0) << "\n";
}

Dataset load_corpus(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "dataset.txt");
  if (!manifest) throw DataError("no dataset.txt in " + dir);
  Dataset ds;
  std::string split, stem;
  while (manifest >> split >> stem) {
    ImagePair pair;
    pair.name = stem;
    pair.low = read_png((fs::path(dir) / (stem + "_low.png")).string());
    pair.gt = read_png((fs::path(dir) / (stem + "_gt.png")).string());
    pair.bundle_low = load_bundle((fs::path(dir) / (stem + "_low_bundle")).string());
    pair.bundle_gt = load_bundle((fs::path(dir) / (stem + "_gt_bundle")).string());
    pair.validate();
    if (split == "train")
      ds.train.push_back(std::move(pair));
    else if (split == "val")
      ds.val.push_back(std::move(pair));
    else
      throw DataError("dataset.txt: unknown split '" + split + "'");
  }
  if (ds.train.empty()) throw DataError("dataset at " + dir + " has no training pairs");
  return ds;
}

namespace {

TensorF crop(const TensorF& t, int64_t y0, int64_t x0, int64_t size) {
  const int64_t w = t.dim(1), c = t.dim(2);
  TensorF out({size, size, c});
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x)
      for (int64_t ch = 0; ch < c; ++ch)
        out[(y * size + x) * c + ch] = t[((y0 + y) * w + x0 + x) * c + ch];
  return out;
}

}  // namespace

PatchSample sample_patch(const ImagePair& pair, int64_t patch, bool augment,
                         const std::vector<int>& active, Rng& rng) {
  const int64_t h = pair.low.dim(0), w = pair.low.dim(1);
  if (patch > h || patch > w)
    throw ShapeError("image '" + pair.name + "' (" + std::to_string(h) + "x" +
                     std::to_string(w) + ") is smaller than the " + std::to_string(patch) +
                     " patch");
  const int64_t y0 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(h - patch + 1)));
  const int64_t x0 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(w - patch + 1)));
  const int element = augment ? static_cast<int>(rng.next_below(8)) : 0;
  auto take = [&](const TensorF& t) { return dihedral_apply(crop(t, y0, x0, patch), element); };
  PatchSample sample;
  sample.low = take(pair.low);
  sample.gt = take(pair.gt);
  for (int j : active) {
    sample.mods_low.push_back(take(pair.bundle_low.maps[static_cast<size_t>(j)]));
    sample.mods_gt.push_back(take(pair.bundle_gt.maps[static_cast<size_t>(j)]));
  }
  return sample;
}

}  // namespace cmt
