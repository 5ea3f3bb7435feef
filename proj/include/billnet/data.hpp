// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "billnet/model.hpp"
#include "billnet/tensor.hpp"

namespace billnet::data {

/// Frame indices for a clip of t_raw frames: 2x downsampling (even indices)
/// above `downsample_above` frames, then symmetric padding (front first)
/// or a random window of `target` frames. Indices refer to the raw clip.
std::vector<int> temporal_fit(int t_raw, std::mt19937_64& rng, int target = 16, int downsample_above = 24);

/// 8-bit grayscale image, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// Reads binary (P5) or ASCII (P2) PGM with maxval <= 255.
Image read_pgm(const std::filesystem::path& path);
/// Writes binary P5.
void write_pgm(const std::filesystem::path& path, const Image& img);

/// Aspect-preserving bilinear resize so the image covers height x width,
/// then a center crop.
Image resize_crop(const Image& img, int height, int width);

struct ClipMeta {
  std::string clip_id;
  int label = 0;
  int frame_count = 0;
  std::filesystem::path source;
};

/// One clip as 8-bit codes laid out (T,H,W) with a single channel.
struct Clip {
  ClipMeta meta;
  std::vector<std::uint8_t> codes;
};

struct Dataset {
  int frames = 0;
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<Clip> clips;

  std::size_t size() const { return clips.size(); }
  Shape clip_shape(int batch) const { return Shape{batch, frames, height, width, 1}; }
  /// Stacks the chosen clips into a code tensor (N,T,H,W,1).
  Tensor5 batch(const std::vector<std::size_t>& indices) const;
  std::vector<int> labels(const std::vector<std::size_t>& indices) const;
};

/// Every fifth clip (index % 5 == 4) is held out for testing.
struct Split {
  Dataset train;
  Dataset test;
};
Split split(const Dataset& all);

/// Frames of a clip directory (frame_%05d.pgm, contiguous numbering),
/// resized to H x W and fitted to `frames` time steps.
Clip ingest_frames(const std::filesystem::path& dir, int frames, int height, int width, std::mt19937_64& rng);

/// Scales 8-bit codes to [0,1] as the reference path sees them.
Tensor5 binarize_stem_input(const Tensor5& codes);

/// Writes <root>/<class>/<clip_id>/frame_%05d.pgm and <root>/manifest.csv.
void write_dataset(const std::filesystem::path& root, const Dataset& ds);
/// Loads a dataset directory through its manifest, in manifest order. Every
/// clip goes through ingest_frames, which leaves a clip that already has
/// the configured frame count and resolution unchanged.
Dataset load_dataset(const std::filesystem::path& root, const BillnetConfig& cfg, std::uint64_t seed);

/// Moving-blob gestures on a torus. Class k drifts one Gaussian blob in
/// direction 2*pi*k/classes (right, up, left, down for four classes) from a
/// uniformly random start, so a single frame has the same distribution for
/// every class.
struct SyntheticSpec {
  int classes = 4;
  int clips = 2000;
  int frames = 8;
  int height = 24;
  int width = 32;
  double speed = 2.0;   // pixels per frame
  double sigma = 2.0;   // blob radius
  double noise = 0.0;   // additive Gaussian noise on [0,1] intensities, clamped
  std::uint64_t seed = 1;
};

Dataset generate_synthetic(const SyntheticSpec& spec);

/// splitmix64 finalizer; per-clip seeds are splitmix64(seed + index).
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace billnet::data
