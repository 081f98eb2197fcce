#pragma once

#include <random>
#include <string>
#include <vector>

#include "mrfn/haze.hpp"

namespace mrfn {

struct ImagePair {
  std::string id;
  Image clean;
  Image hazy;
  HazeParams params;
};

/// Loads every manifest entry; the f32 sidecar is used for the hazy image
/// when `prefer_f32` is set and the entry has one.
std::vector<ImagePair> load_pairs(const std::vector<ManifestEntry>& entries, bool prefer_f32 = false);

Image crop_image(const Image& img, int y0, int x0, int h, int w);
/// One of the 8 square symmetries: bits 0-1 = quarter turns, bit 2 = horizontal flip.
/// Non-zero turns require a square image.
Image dihedral(const Image& img, int code);

struct Augment {
  bool rotate = false;  // random quarter turns
  bool flip = false;    // random horizontal flip (with turns this also covers vertical)
};

struct Batch {
  Tensor hazy;   // [N,3,crop,crop]
  Tensor clean;  // [N,3,crop,crop]
};

/// Random pairs, random crop position, optional random symmetry; all choices
/// drawn from `rng` so a batch is a pure function of the generator state.
Batch sample_batch(const std::vector<ImagePair>& pairs, int batch, int crop, Augment augment,
                   std::mt19937_64& rng, DType dtype = DType::F32);

}  // namespace mrfn
