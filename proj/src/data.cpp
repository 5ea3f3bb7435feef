// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace billnet::data {

std::vector<int> temporal_fit(int t_raw, std::mt19937_64& rng, int target, int downsample_above) {
  require(t_raw >= 1 && target >= 1, ErrorKind::kBadConfig, "temporal_fit needs t_raw >= 1 and target >= 1");
  std::vector<int> idx;
  const int step = t_raw > downsample_above ? 2 : 1;
  for (int i = 0; i < t_raw; i += step) idx.push_back(i);
  const int len = static_cast<int>(idx.size());
  if (len >= target) {
    std::uniform_int_distribution<int> start(0, len - target);
    const int s = start(rng);
    return std::vector<int>(idx.begin() + s, idx.begin() + s + target);
  }
  const int need = target - len;
  const int front = (need + 1) / 2;
  std::vector<int> out(static_cast<std::size_t>(front), idx.front());
  out.insert(out.end(), idx.begin(), idx.end());
  out.resize(static_cast<std::size_t>(target), idx.back());
  return out;
}

namespace {

// Next whitespace-delimited PGM header token, skipping comments.
std::string header_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string rest;
      std::getline(in, rest);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

int header_int(std::istream& in, const std::filesystem::path& path) {
  const std::string tok = header_token(in);
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used == tok.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::kBadResolution, "bad PGM header in '" + path.string() + "'");
}

}  // namespace

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  const std::string magic = header_token(in);
  if (magic != "P5" && magic != "P2") fail(ErrorKind::kBadResolution, "'" + path.string() + "' is not a P2/P5 PGM");
  Image img;
  img.width = header_int(in, path);
  img.height = header_int(in, path);
  const int maxval = header_int(in, path);
  if (img.width < 1 || img.height < 1 || img.width > 1 << 14 || img.height > 1 << 14) {
    fail(ErrorKind::kBadResolution, "'" + path.string() + "' has unusable dimensions");
  }
  if (maxval < 1 || maxval > 255) fail(ErrorKind::kBadResolution, "'" + path.string() + "' is not an 8-bit PGM");
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  img.pixels.resize(n);
  if (magic == "P5") {
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) fail(ErrorKind::kBadResolution, "'" + path.string() + "' is truncated");
  } else {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::clamp(header_int(in, path), 0, maxval));
  }
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) fail(ErrorKind::kIo, "short write to '" + path.string() + "'");
}

Image resize_crop(const Image& img, int height, int width) {
  require(height >= 1 && width >= 1, ErrorKind::kBadResolution, "target resolution must be positive");
  if (img.height == height && img.width == width) return img;
  // Scale so the resized image covers the target, then crop the center.
  const double s = std::max(static_cast<double>(height) / img.height, static_cast<double>(width) / img.width);
  const double rh = img.height * s;
  const double rw = img.width * s;
  const double oy = (rh - height) / 2.0;
  const double ox = (rw - width) / 2.0;
  Image out;
  out.width = width;
  out.height = height;
  out.pixels.resize(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    // Pixel centers map back to source coordinates.
    const double sy = std::clamp((y + oy + 0.5) / s - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fy = sy - y0;
    for (int x = 0; x < width; ++x) {
      const double sx = std::clamp((x + ox + 0.5) / s - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double fx = sx - x0;
      const double v = (1 - fy) * ((1 - fx) * img.at(x0, y0) + fx * img.at(x1, y0)) +
                       fy * ((1 - fx) * img.at(x0, y1) + fx * img.at(x1, y1));
      out.pixels[static_cast<std::size_t>(y) * width + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return out;
}

Tensor5 Dataset::batch(const std::vector<std::size_t>& indices) const {
  const Shape s = clip_shape(static_cast<int>(indices.size()));
  Tensor5 x(s);
  const std::size_t per = static_cast<std::size_t>(frames) * height * width;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& codes = clips[indices[i]].codes;
    std::copy(codes.begin(), codes.end(), x.vec().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return x;
}

std::vector<int> Dataset::labels(const std::vector<std::size_t>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(clips[i].meta.label);
  return out;
}

Split split(const Dataset& all) {
  Split s;
  s.train = all;
  s.train.clips.clear();
  s.test = s.train;
  for (std::size_t i = 0; i < all.clips.size(); ++i) (i % 5 == 4 ? s.test : s.train).clips.push_back(all.clips[i]);
  return s;
}

namespace {

std::string frame_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05d.pgm", i);
  return buf;
}

}  // namespace

Clip ingest_frames(const std::filesystem::path& dir, int frames, int height, int width, std::mt19937_64& rng) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) fail(ErrorKind::kMissingFrames, "'" + dir.string() + "' is not a directory");
  std::vector<int> numbers;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    int num = 0;
    char tail = 0;
    if (name.size() == 15 && std::sscanf(name.c_str(), "frame_%5d.pg%c", &num, &tail) == 2 && tail == 'm') {
      numbers.push_back(num);
    }
  }
  if (numbers.empty()) fail(ErrorKind::kMissingFrames, "no frame_%05d.pgm files in '" + dir.string() + "'");
  std::sort(numbers.begin(), numbers.end());
  for (std::size_t i = 1; i < numbers.size(); ++i) {
    if (numbers[i] != numbers[i - 1] + 1) {
      fail(ErrorKind::kMissingFrames, "'" + dir.string() + "' skips from frame " + std::to_string(numbers[i - 1]) +
                                          " to " + std::to_string(numbers[i]));
    }
  }
  Clip clip;
  clip.meta.frame_count = static_cast<int>(numbers.size());
  clip.meta.source = dir;
  clip.meta.clip_id = dir.filename().string();
  const std::vector<int> pick = temporal_fit(clip.meta.frame_count, rng, frames);
  clip.codes.reserve(static_cast<std::size_t>(frames) * height * width);
  int raw_w = 0;
  int raw_h = 0;
  std::map<int, Image> cache;
  for (int i : pick) {
    auto it = cache.find(i);
    if (it == cache.end()) {
      Image img = read_pgm(dir / frame_name(numbers.front() + i));
      if (raw_w == 0) {
        raw_w = img.width;
        raw_h = img.height;
      } else if (img.width != raw_w || img.height != raw_h) {
        fail(ErrorKind::kBadResolution, "frames of '" + dir.string() + "' differ in size");
      }
      it = cache.emplace(i, resize_crop(img, height, width)).first;
    }
    clip.codes.insert(clip.codes.end(), it->second.pixels.begin(), it->second.pixels.end());
  }
  return clip;
}

Tensor5 binarize_stem_input(const Tensor5& codes) {
  Tensor5 x(codes.shape());
  for (std::int64_t i = 0; i < codes.size(); ++i) x[i] = codes[i] / 255.0;
  return x;
}

void write_dataset(const std::filesystem::path& root, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  std::ofstream manifest(root / "manifest.csv", std::ios::trunc);
  if (!manifest) fail(ErrorKind::kIo, "cannot write '" + (root / "manifest.csv").string() + "'");
  manifest << "clip_id,class,frame_count\n";
  const std::size_t frame = static_cast<std::size_t>(ds.height) * ds.width;
  for (const Clip& c : ds.clips) {
    const fs::path dir = root / std::to_string(c.meta.label) / c.meta.clip_id;
    fs::create_directories(dir);
    const int t = static_cast<int>(c.codes.size() / frame);
    for (int i = 0; i < t; ++i) {
      Image img;
      img.width = ds.width;
      img.height = ds.height;
      img.pixels.assign(c.codes.begin() + static_cast<std::ptrdiff_t>(i * frame),
                        c.codes.begin() + static_cast<std::ptrdiff_t>((i + 1) * frame));
      write_pgm(dir / frame_name(i), img);
    }
    manifest << c.meta.clip_id << ',' << c.meta.label << ',' << t << '\n';
  }
}

Dataset load_dataset(const std::filesystem::path& root, const BillnetConfig& cfg, std::uint64_t seed) {
  require(cfg.in_channels == 1, ErrorKind::kBadConfig, "frame datasets are grayscale; set in_channels to 1");
  std::ifstream manifest(root / "manifest.csv");
  if (!manifest) fail(ErrorKind::kIo, "cannot open '" + (root / "manifest.csv").string() + "'");
  Dataset ds;
  ds.frames = cfg.frames;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.classes = cfg.classes;
  std::string line;
  std::getline(manifest, line);
  if (line != "clip_id,class,frame_count") fail(ErrorKind::kBadConfig, "unexpected manifest header '" + line + "'");
  std::uint64_t index = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string id, label, count;
    if (!std::getline(row, id, ',') || !std::getline(row, label, ',') || !std::getline(row, count)) {
      fail(ErrorKind::kBadConfig, "malformed manifest row '" + line + "'");
    }
    const int cls = std::stoi(label);
    if (cls < 0 || cls >= cfg.classes) fail(ErrorKind::kBadConfig, "label out of range in row '" + line + "'");
    std::mt19937_64 rng(splitmix64(seed + index));
    Clip clip = ingest_frames(root / label / id, cfg.frames, cfg.height, cfg.width, rng);
    if (clip.meta.frame_count != std::stoi(count)) {
      fail(ErrorKind::kMissingFrames, "clip '" + id + "' has " + std::to_string(clip.meta.frame_count) +
                                          " frames, manifest says " + count);
    }
    clip.meta.label = cls;
    ds.clips.push_back(std::move(clip));
    ++index;
  }
  return ds;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  require(spec.classes >= 2 && spec.clips >= 1 && spec.frames >= 1 && spec.height >= 1 && spec.width >= 1,
          ErrorKind::kBadConfig, "synthetic spec needs >= 2 classes and positive sizes");
  require(spec.noise >= 0.0, ErrorKind::kBadConfig, "synthetic noise must be >= 0");
  Dataset ds;
  ds.frames = spec.frames;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.classes = spec.classes;
  ds.clips.reserve(static_cast<std::size_t>(spec.clips));
  const double two_sigma2 = 2.0 * spec.sigma * spec.sigma;
  for (int i = 0; i < spec.clips; ++i) {
    std::mt19937_64 rng(splitmix64(spec.seed + static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> ux(0.0, spec.width);
    std::uniform_real_distribution<double> uy(0.0, spec.height);
    std::normal_distribution<double> noise(0.0, spec.noise > 0.0 ? spec.noise : 1.0);
    Clip clip;
    clip.meta.label = i % spec.classes;
    clip.meta.frame_count = spec.frames;
    char id[32];
    std::snprintf(id, sizeof id, "clip_%06d", i);
    clip.meta.clip_id = id;
    const double angle = 2.0 * std::numbers::pi * clip.meta.label / spec.classes;
    const double vx = spec.speed * std::cos(angle);
    const double vy = -spec.speed * std::sin(angle);  // image rows grow downward
    const double x0 = ux(rng);
    const double y0 = uy(rng);
    clip.codes.reserve(static_cast<std::size_t>(spec.frames) * spec.height * spec.width);
    for (int t = 0; t < spec.frames; ++t) {
      const double cx = x0 + vx * t;
      const double cy = y0 + vy * t;
      for (int y = 0; y < spec.height; ++y) {
        // Shortest distance on the torus.
        double dy = std::fmod(std::abs(y + 0.5 - cy), static_cast<double>(spec.height));
        dy = std::min(dy, spec.height - dy);
        for (int x = 0; x < spec.width; ++x) {
          double dx = std::fmod(std::abs(x + 0.5 - cx), static_cast<double>(spec.width));
          dx = std::min(dx, spec.width - dx);
          const double v = std::exp(-(dx * dx + dy * dy) / two_sigma2) + (spec.noise > 0.0 ? noise(rng) : 0.0);
          clip.codes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
        }
      }
    }
    ds.clips.push_back(std::move(clip));
  }
  return ds;
}

}  // namespace billnet::data
