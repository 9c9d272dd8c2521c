#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pavt/common.hpp"
#include "pavt/posemap.hpp"

namespace pavt {

// 2-D affine map [x'; y'] = M [x; y] + t with M = [[a, b], [c, d]].
struct ViewTransform {
  double a = 1, b = 0, c = 0, d = 1, tx = 0, ty = 0;

  std::pair<double, double> apply(double x, double y) const {
    return {a * x + b * y + tx, c * x + d * y + ty};
  }
  ViewTransform inverse() const;
  bool is_identity() const;
};

struct VideoSample {
  int id = 0;
  int label = 0;
  int view = 0;
  int episode = -1;
  std::string split = "train";
  VideoTensor frames;
  KeypointSet kps;
  ViewTransform view_transform;  // canonical -> this view
  bool regenerated = false;      // aligned pair needed a shrunken transform
};

struct ViewSpec {
  double rotation_max = 0.45;  // radians
  double scale_min = 0.85;
  double scale_max = 1.10;
  double translate_max = 3.0;
};

struct GeneratorSpec {
  std::string kind = "classification";  // or "alignment"
  int classes = 6;
  int keypoints = 5;
  int tau = 8, H = 32, W = 32, C = 1;
  int train_count = 600;
  int test_count = 200;
  int distractors = 3;
  double blob_sigma = 1.5;
  ViewSpec view;
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static GeneratorSpec from_json_text(const std::string& text);
};

// Canonical float keypoint track, frame-major: coords[t*K + k] = (x, y).
std::vector<std::pair<double, double>> figure_track(const GeneratorSpec& spec,
                                                    int label, uint64_t sample_key);

// Labeled clips: a jointed figure moves with a class-specific pattern over
// label-independent moving distractors. Sample ids start at id_offset; labels
// cycle over classes.
std::vector<VideoSample> generate_classification_set(const GeneratorSpec& spec, int n,
                                                     const std::string& split,
                                                     int id_offset = 0);

// One trajectory rendered under two affine views; frame t of A corresponds to
// frame t of B. View A is the canonical view (identity).
std::pair<VideoSample, VideoSample> generate_aligned_pair(const GeneratorSpec& spec,
                                                          int episode);

struct Dataset {
  GeneratorSpec spec;
  std::vector<VideoSample> samples;
};

// Full train+test dataset per spec.kind.
Dataset generate_dataset(const GeneratorSpec& spec);

// Directory layout: manifest.json plus per-sample raw frames (16-byte u32
// dims header, little-endian float32) and keypoint JSON files.
void dataset_write(const Dataset& ds, const std::filesystem::path& dir);
Dataset dataset_read(const std::filesystem::path& dir,
                     const std::string& split_filter = "");

}  // namespace pavt
