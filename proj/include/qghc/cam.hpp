#pragma once

// Class activation map export: an 8-bit PGM heatmap, nearest-neighbour
// upsampled to the input resolution, plus one CSV metadata row per sample.
// The channel weights are the classifier linearised through its hidden layer
// (see VqaModel::cam_weights), so the map is an approximation of the true
// evidence for the answer.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qghc/vqa_model.hpp"

namespace qghc {

struct CamResult {
  std::size_t index = 0;
  std::string question;
  std::size_t predicted = 0;
  std::size_t truth = 0;
  Tensor<float> heatmap;            // (h, w) normalised to [0,1]
  std::vector<std::uint8_t> pixels; // kImage x kImage, row-major
  std::size_t argmax_row = 0;       // pixel coordinates
  std::size_t argmax_col = 0;
};

// Upsamples an (h, w) map in [0,1] to size x size bytes by nearest neighbour.
inline std::vector<std::uint8_t> heatmap_pixels(const Tensor<float>& map, std::size_t size) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  std::vector<std::uint8_t> px(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const float v = std::clamp(map[(y * h / size) * w + x * w / size], 0.0f, 1.0f);
      px[y * size + x] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return px;
}

inline std::string encode_pgm(const std::vector<std::uint8_t>& px, std::size_t size) {
  std::string s = "P5\n" + std::to_string(size) + " " + std::to_string(size) + "\n255\n";
  s.append(reinterpret_cast<const char*>(px.data()), px.size());
  return s;
}

inline CamResult compute_cam(VqaModel& model, const data::Dataset& ds, std::size_t index) {
  if (index >= ds.size())
    throw IndexError("cam: index " + std::to_string(index) + " out of range for " + std::to_string(ds.size()) +
                     " samples");
  if (model.feature_channels() == 0) throw ConfigError("cam: model has no image feature map");
  const std::size_t idx[1] = {index};
  Batch b = Batch::gather(ds.samples, idx, model.config().uses_image());
  NoGradGuard ng;
  ForwardResult r = model.forward(b, Mode::eval);
  CamResult c;
  c.index = index;
  c.question = data::question_text(ds.samples[index].tokens);
  c.predicted = argmax_row(r.logits.value(), 0);
  c.truth = ds.samples[index].answer;
  const Tensor<float>& f = r.features.value();
  Tensor<float> m = normalize_heatmap(cam_map(f, model.cam_weights(), c.predicted));
  c.heatmap = m.reshape({f.dim(2), f.dim(3)});
  c.pixels = heatmap_pixels(c.heatmap, data::kImage);
  // Argmax on the unquantised map, reported as the first pixel of its block.
  const auto hm = c.heatmap.data();
  const auto best = static_cast<std::size_t>(std::max_element(hm.begin(), hm.end()) - hm.begin());
  c.argmax_row = (best / f.dim(3)) * data::kImage / f.dim(2);
  c.argmax_col = (best % f.dim(3)) * data::kImage / f.dim(3);
  return c;
}

inline std::string cam_csv_header() { return "sample,question,predicted,truth,argmax_row,argmax_col\n"; }

inline std::string cam_csv_row(const CamResult& c, const std::vector<std::string>& answers) {
  return std::to_string(c.index) + "," + c.question + "," + answers.at(c.predicted) + "," + answers.at(c.truth) + "," +
         std::to_string(c.argmax_row) + "," + std::to_string(c.argmax_col) + "\n";
}

}  // namespace qghc
