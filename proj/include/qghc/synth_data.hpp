#pragma once

// Grid-world visual question answering: 4x4 scenes of colored shapes rendered
// to 32x32 images, four question families, and the QVD1 dataset file.
//
// QVD1 layout (all integers little-endian):
//   "QVD1" | u32 header_len | header (UTF-8 key=value lines) | samples
//   sample = f32[3*32*32] image | u8 token_count | u16[token_count] | u16 answer
// Header keys: version, vocab, answers, count, image_shape, seed, crc32.
// crc32 covers the vocab value, '\n', the answers value, '\n', then every
// sample byte, so a reordered vocabulary or answer list is detected.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qghc/io.hpp"
#include "qghc/tensor.hpp"

namespace qghc::data {

inline constexpr std::size_t kGrid = 4;
inline constexpr std::size_t kCell = 8;
inline constexpr std::size_t kImage = kGrid * kCell;
inline constexpr std::size_t kMaxTokens = 8;
inline constexpr std::size_t kMaxObjects = 6;
inline constexpr float kBackground = 0.1f;

enum class ShapeKind : std::uint8_t { square, disc, triangle };
enum class Color : std::uint8_t { red, green, blue, yellow };
enum class Family : std::uint8_t { color, shape, count, exist };

inline constexpr std::array<const char*, 3> kShapeNames{"square", "disc", "triangle"};
inline constexpr std::array<const char*, 4> kColorNames{"red", "green", "blue", "yellow"};
inline constexpr std::array<const char*, 4> kFamilyNames{"color", "shape", "count", "exist"};

// Index 0 is padding. Order is part of the file format.
inline const std::vector<std::string>& vocab_words() {
  static const std::vector<std::string> v{"<pad>", "what",  "color", "is",     "the",    "shape",  "thing",
                                          "how",   "many",  "things", "there", "a",      "square", "disc",
                                          "triangle", "red", "green", "blue",  "yellow"};
  return v;
}

inline const std::vector<std::string>& answer_words() {
  static const std::vector<std::string> v{"red", "green", "blue", "yellow", "square", "disc", "triangle",
                                          "0",   "1",     "2",    "3",      "yes",    "no"};
  return v;
}

inline std::uint16_t word(const std::string& w) {
  const auto& v = vocab_words();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] == w) return static_cast<std::uint16_t>(i);
  throw ConfigError("unknown word " + w);
}

inline std::uint16_t color_answer(Color c) { return static_cast<std::uint16_t>(c); }
inline std::uint16_t shape_answer(ShapeKind s) { return static_cast<std::uint16_t>(4 + static_cast<int>(s)); }
inline std::uint16_t count_answer(std::size_t n) { return static_cast<std::uint16_t>(7 + n); }
inline constexpr std::uint16_t kYes = 11;
inline constexpr std::uint16_t kNo = 12;

struct Object {
  ShapeKind shape;
  Color color;
};

struct SceneSpec {
  std::array<std::optional<Object>, kGrid * kGrid> cells;

  std::size_t object_count() const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.has_value();
    return n;
  }
  std::size_t count_shape(ShapeKind s) const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c && c->shape == s;
    return n;
  }
  std::size_t count_color(Color col) const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c && c->color == col;
    return n;
  }
  bool has(Color col, ShapeKind s) const {
    for (const auto& c : cells)
      if (c && c->color == col && c->shape == s) return true;
    return false;
  }
};

using Tokens = std::array<std::uint16_t, kMaxTokens>;

struct Question {
  Tokens tokens{};
  std::uint16_t answer = 0;
  Family family = Family::color;
  // Cell of the object the question is about, for color/shape questions.
  std::optional<std::size_t> target_cell;
};

struct SyntheticSample {
  Tensor<float> image;  // (3, 32, 32)
  Tokens tokens{};
  std::uint16_t answer = 0;

  std::size_t length() const {
    std::size_t n = 0;
    while (n < kMaxTokens && tokens[n] != 0) ++n;
    return n;
  }
};

inline Family family_of(const Tokens& t) {
  if (t[0] == word("how")) return Family::count;
  if (t[0] == word("is")) return Family::exist;
  return t[1] == word("color") ? Family::color : Family::shape;
}

inline std::string question_text(const Tokens& t) {
  std::string s;
  for (auto w : t) {
    if (w == 0) break;
    if (!s.empty()) s += ' ';
    s += vocab_words().at(w);
  }
  return s;
}

inline SceneSpec generate_scene(Rng& rng) {
  SceneSpec scene;
  const std::size_t k = 1 + rng.below(kMaxObjects);
  std::array<std::size_t, kGrid * kGrid> cells{};
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(cells.begin(), cells.end());
  for (std::size_t i = 0; i < k; ++i) {
    const auto shape = static_cast<ShapeKind>(rng.below(3));
    const auto color = static_cast<Color>(rng.below(4));
    scene.cells[cells[i]] = Object{shape, color};
  }
  return scene;
}

// Whether pixel (py, px) of an 8x8 patch belongs to the shape.
inline bool shape_covers(ShapeKind s, std::size_t py, std::size_t px) {
  switch (s) {
    case ShapeKind::square: return py >= 1 && py <= 6 && px >= 1 && px <= 6;
    case ShapeKind::disc: {
      const double dy = py + 0.5 - 4.0, dx = px + 0.5 - 4.0;
      return dy * dy + dx * dx <= 9.0;
    }
    case ShapeKind::triangle: return py >= 1 && py <= 6 && px >= 1 && px <= py;
  }
  return false;
}

inline std::array<float, 3> color_rgb(Color c) {
  switch (c) {
    case Color::red: return {1.0f, kBackground, kBackground};
    case Color::green: return {kBackground, 1.0f, kBackground};
    case Color::blue: return {kBackground, kBackground, 1.0f};
    case Color::yellow: return {1.0f, 1.0f, kBackground};
  }
  return {};
}

inline Tensor<float> render_image(const SceneSpec& scene) {
  Tensor<float> img({3, kImage, kImage}, kBackground);
  for (std::size_t cell = 0; cell < scene.cells.size(); ++cell) {
    if (!scene.cells[cell]) continue;
    const auto [shape, color] = *scene.cells[cell];
    const auto rgb = color_rgb(color);
    const std::size_t y0 = (cell / kGrid) * kCell, x0 = (cell % kGrid) * kCell;
    for (std::size_t py = 0; py < kCell; ++py)
      for (std::size_t px = 0; px < kCell; ++px)
        if (shape_covers(shape, py, px))
          for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * kImage + y0 + py) * kImage + x0 + px] = rgb[ch];
  }
  return img;
}

namespace detail {
inline Tokens make_tokens(std::initializer_list<const char*> words) {
  Tokens t{};
  std::size_t i = 0;
  for (auto w : words) t[i++] = word(w);
  return t;
}

inline std::optional<std::size_t> cell_where(const SceneSpec& s, auto pred) {
  for (std::size_t i = 0; i < s.cells.size(); ++i)
    if (s.cells[i] && pred(*s.cells[i])) return i;
  return std::nullopt;
}
}  // namespace detail

inline constexpr int kQuestionRetries = 100;

// Picks a template uniformly, then its argument uniformly; draws that do not
// apply to the scene are retried. Returns nullopt after kQuestionRetries.
inline std::optional<Question> generate_question(const SceneSpec& scene, Rng& rng) {
  for (int attempt = 0; attempt < kQuestionRetries; ++attempt) {
    Question q;
    q.family = static_cast<Family>(rng.below(4));
    switch (q.family) {
      case Family::color: {
        const auto s = static_cast<ShapeKind>(rng.below(3));
        if (scene.count_shape(s) != 1) continue;
        q.target_cell = detail::cell_where(scene, [&](const Object& o) { return o.shape == s; });
        q.tokens = detail::make_tokens({"what", "color", "is", "the", kShapeNames[static_cast<int>(s)]});
        q.answer = color_answer(scene.cells[*q.target_cell]->color);
        return q;
      }
      case Family::shape: {
        const auto c = static_cast<Color>(rng.below(4));
        if (scene.count_color(c) != 1) continue;
        q.target_cell = detail::cell_where(scene, [&](const Object& o) { return o.color == c; });
        q.tokens = detail::make_tokens({"what", "shape", "is", "the", kColorNames[static_cast<int>(c)], "thing"});
        q.answer = shape_answer(scene.cells[*q.target_cell]->shape);
        return q;
      }
      case Family::count: {
        const auto c = static_cast<Color>(rng.below(4));
        const std::size_t n = scene.count_color(c);
        if (n > 3) continue;
        q.tokens = detail::make_tokens({"how", "many", kColorNames[static_cast<int>(c)], "things"});
        q.answer = count_answer(n);
        return q;
      }
      case Family::exist: {
        const bool want_yes = rng.below(2) == 0;
        std::vector<std::pair<Color, ShapeKind>> pool;
        for (int c = 0; c < 4; ++c)
          for (int s = 0; s < 3; ++s)
            if (scene.has(static_cast<Color>(c), static_cast<ShapeKind>(s)) == want_yes)
              pool.emplace_back(static_cast<Color>(c), static_cast<ShapeKind>(s));
        if (pool.empty()) continue;
        const auto [c, s] = pool[rng.below(pool.size())];
        q.tokens = detail::make_tokens(
            {"is", "there", "a", kColorNames[static_cast<int>(c)], kShapeNames[static_cast<int>(s)]});
        q.answer = want_yes ? kYes : kNo;
        return q;
      }
    }
  }
  return std::nullopt;
}

struct GeneratedItem {
  SceneSpec scene;
  Question question;
};

// Sample `index` of the corpus with `seed`; a pure function of both.
inline GeneratedItem generate_item(std::uint64_t seed, std::uint64_t index) {
  Rng rng = Rng::derive(seed, index);
  while (true) {
    SceneSpec scene = generate_scene(rng);
    if (auto q = generate_question(scene, rng)) return {scene, *q};
  }
}

inline SyntheticSample make_sample(const GeneratedItem& item) {
  return {render_image(item.scene), item.question.tokens, item.question.answer};
}

struct Dataset {
  std::vector<std::string> vocab = vocab_words();
  std::vector<std::string> answers = answer_words();
  std::uint64_t seed = 0;
  std::vector<SyntheticSample> samples;

  std::size_t size() const { return samples.size(); }
};

inline Dataset generate_dataset(std::uint64_t seed, std::size_t count, std::uint64_t first_index = 0) {
  Dataset ds;
  ds.seed = seed;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(make_sample(generate_item(seed, first_index + i)));
  return ds;
}

// Best accuracy any question-only predictor can reach on `ds`: for each
// distinct question, the count of its most frequent answer.
inline double blind_optimal_accuracy(const Dataset& ds) {
  if (ds.samples.empty()) return 0.0;
  std::map<Tokens, std::map<std::uint16_t, std::size_t>> hist;
  for (const auto& s : ds.samples) ++hist[s.tokens][s.answer];
  std::size_t best = 0;
  for (const auto& [q, h] : hist) {
    std::size_t m = 0;
    for (const auto& [a, n] : h) m = std::max(m, n);
    best += m;
  }
  return static_cast<double>(best) / static_cast<double>(ds.samples.size());
}

inline std::vector<std::size_t> answer_histogram(const Dataset& ds) {
  std::vector<std::size_t> h(ds.answers.size(), 0);
  for (const auto& s : ds.samples) ++h.at(s.answer);
  return h;
}

inline constexpr std::string_view kDatasetMagic = "QVD1";
inline constexpr int kDatasetVersion = 1;

namespace detail {
inline std::string encode_samples(const Dataset& ds) {
  io::Writer w;
  for (const auto& s : ds.samples) {
    if (s.image.shape() != Shape{3, kImage, kImage}) throw ShapeError("dataset image must be (3,32,32)");
    for (float v : s.image.data()) w.f32(v);
    const std::size_t n = s.length();
    w.u8(static_cast<std::uint8_t>(n));
    for (std::size_t i = 0; i < n; ++i) w.u16(s.tokens[i]);
    w.u16(s.answer);
  }
  return std::move(w.str());
}

inline std::uint32_t dataset_crc(const std::string& vocab_line, const std::string& answers_line,
                                 std::string_view samples) {
  std::uint32_t c = io::crc32_update(0, vocab_line.data(), vocab_line.size());
  c = io::crc32_update(c, "\n", 1);
  c = io::crc32_update(c, answers_line.data(), answers_line.size());
  c = io::crc32_update(c, "\n", 1);
  return io::crc32_update(c, samples.data(), samples.size());
}
}  // namespace detail

inline std::string serialize_dataset(const Dataset& ds) {
  const std::string body = detail::encode_samples(ds);
  const std::string vocab = io::join(ds.vocab, ',');
  const std::string answers = io::join(ds.answers, ',');
  std::string header;
  header += "version=" + std::to_string(kDatasetVersion) + "\n";
  header += "vocab=" + vocab + "\n";
  header += "answers=" + answers + "\n";
  header += "count=" + std::to_string(ds.samples.size()) + "\n";
  header += "image_shape=3,32,32\n";
  header += "seed=" + std::to_string(ds.seed) + "\n";
  header += "crc32=" + io::hex32(detail::dataset_crc(vocab, answers, body)) + "\n";
  io::Writer w;
  w.bytes(kDatasetMagic);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header);
  w.bytes(body);
  return std::move(w.str());
}

inline Dataset parse_dataset(std::string_view bytes) {
  io::Reader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != kDatasetMagic) throw FormatError("magic", "not a QVD1 dataset (bad magic)");
  const std::uint32_t hlen = r.u32();
  const std::string_view header = r.bytes(hlen);
  std::map<std::string, std::string> kv;
  for (auto& [k, v] : io::parse_kv_lines(header, "dataset header")) kv[k] = v;
  for (const char* key : {"version", "vocab", "answers", "count", "image_shape", "seed", "crc32"})
    if (!kv.count(key)) throw FormatError("header", std::string("dataset header missing '") + key + "'");
  if (kv["version"] != std::to_string(kDatasetVersion)) throw FormatError("header", "unsupported dataset version");
  if (kv["image_shape"] != "3,32,32") throw FormatError("header", "unsupported image shape " + kv["image_shape"]);

  Dataset ds;
  ds.vocab = io::split(kv["vocab"], ',');
  ds.answers = io::split(kv["answers"], ',');
  std::size_t count = 0;
  try {
    ds.seed = std::stoull(kv["seed"]);
    count = std::stoull(kv["count"]);
  } catch (const std::exception&) {
    throw FormatError("header", "non-numeric count or seed");
  }
  if (ds.vocab.size() > 65535 || ds.answers.size() > 65535) throw FormatError("header", "vocabulary too large");

  const std::string_view body = r.rest();
  const std::uint32_t crc = detail::dataset_crc(kv["vocab"], kv["answers"], body);
  // Index errors are only reported once the checksum holds, so a corrupted
  // byte reads as "checksum" rather than whatever field it landed in.
  std::optional<FormatError> bad_index;
  auto defer = [&](std::size_t i, const std::string& what) {
    if (!bad_index) bad_index.emplace("index_overflow", "sample " + std::to_string(i) + ": " + what);
  };
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticSample s;
    s.image = Tensor<float>({3, kImage, kImage});
    for (auto& v : s.image.data()) v = r.f32();
    const std::size_t n = r.u8();
    if (n == 0 || n > kMaxTokens) defer(i, "token count " + std::to_string(n));
    for (std::size_t t = 0; t < n; ++t) {
      const std::uint16_t tok = r.u16();
      if (t < kMaxTokens) s.tokens[t] = tok;
      if (tok == 0 || tok >= ds.vocab.size()) defer(i, "token index " + std::to_string(tok) + " out of range");
    }
    s.answer = r.u16();
    if (s.answer >= ds.answers.size()) defer(i, "answer index " + std::to_string(s.answer) + " out of range");
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError("trailing", "unexpected bytes after the last sample");
  if (io::hex32(crc) != kv["crc32"]) throw FormatError("checksum", "dataset CRC32 mismatch");
  if (bad_index) throw *bad_index;
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) { io::write_file(path, serialize_dataset(ds)); }
inline Dataset load_dataset(const std::string& path) { return parse_dataset(io::read_file(path)); }

}  // namespace qghc::data
