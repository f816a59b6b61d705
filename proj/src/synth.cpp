#include <algorithm>
#include <cmath>

#include "dwp/data.hpp"

namespace dwp {

namespace {

struct Stroke {
  double x0, y0, x1, y1, thickness;
};

// Fixed glyph per (alphabet, class): a few oriented strokes whose geometry is
// a pure function of the pair, so the two alphabets are disjoint but share
// low-level edge statistics.
std::vector<Stroke> glyph_strokes(char alphabet, std::int64_t cls) {
  RngStream g = RngStream(alphabet == 'A' ? 0xA11CE5ULL : 0xB0BCA7ULL).derive(
      static_cast<std::uint64_t>(cls));
  const int n_strokes = 2 + static_cast<int>(g.next_below(2));
  std::vector<Stroke> strokes;
  for (int s = 0; s < n_strokes; ++s) {
    // Endpoints inside the central box, rejecting short strokes.
    double x0, y0, x1, y1;
    do {
      x0 = g.next_uniform(6.0, 22.0);
      y0 = g.next_uniform(6.0, 22.0);
      const double angle = g.next_uniform(0.0, 3.14159265358979);
      const double len = g.next_uniform(8.0, 14.0);
      x1 = x0 + len * std::cos(angle);
      y1 = y0 + len * std::sin(angle);
    } while (x1 < 3.0 || x1 > 25.0 || y1 < 3.0 || y1 > 25.0);
    strokes.push_back({x0, y0, x1, y1, g.next_uniform(1.0, 1.6)});
  }
  return strokes;
}

double segment_distance(double px, double py, const Stroke& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = ((px - s.x0) * dx + (py - s.y0) * dy) / len2;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = s.x0 + t * dx, cy = s.y0 + t * dy;
  return std::hypot(px - cx, py - cy);
}

}  // namespace

LabeledDataset synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2) throw std::invalid_argument("synth_dataset: need at least 2 classes");
  constexpr std::int64_t kSize = 28;
  RngStream master(seed);
  LabeledDataset ds;
  ds.classes = spec.classes;
  std::vector<float> data(static_cast<std::size_t>(spec.count * kSize * kSize), 0.0f);

  std::vector<std::vector<Stroke>> glyphs;
  for (std::int64_t c = 0; c < spec.classes; ++c)
    glyphs.push_back(glyph_strokes(spec.alphabet, c));

  for (std::int64_t i = 0; i < spec.count; ++i) {
    const std::int64_t cls = i % spec.classes;
    ds.labels.push_back(cls);
    RngStream r = master.derive(static_cast<std::uint64_t>(i));
    const double tx = r.next_uniform(-2.0, 2.0);
    const double ty = r.next_uniform(-2.0, 2.0);
    const double rot = r.next_uniform(-0.12, 0.12);
    const double scale = r.next_uniform(0.9, 1.1);
    const double cr = std::cos(rot), sr = std::sin(rot);
    std::vector<Stroke> strokes = glyphs[static_cast<std::size_t>(cls)];
    for (auto& s : strokes) {
      auto xf = [&](double& x, double& y) {
        const double ox = (x - 14.0) * scale, oy = (y - 14.0) * scale;
        x = 14.0 + cr * ox - sr * oy + tx;
        y = 14.0 + sr * ox + cr * oy + ty;
      };
      xf(s.x0, s.y0);
      xf(s.x1, s.y1);
    }
    float* img = data.data() + i * kSize * kSize;
    for (std::int64_t y = 0; y < kSize; ++y)
      for (std::int64_t x = 0; x < kSize; ++x) {
        double v = 0.0;
        for (const auto& s : strokes) {
          const double d = segment_distance(static_cast<double>(x), static_cast<double>(y), s);
          v = std::max(v, std::clamp(1.2 * (s.thickness - d) + 0.5, 0.0, 1.0));
        }
        v += spec.noise * r.next_normal();
        img[y * kSize + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  ds.images = Tensor<float>::from({spec.count, 1, kSize, kSize}, std::move(data));
  return ds;
}

}  // namespace dwp
