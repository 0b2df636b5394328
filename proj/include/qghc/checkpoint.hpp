#pragma once

// QCK1 checkpoints: magic, u32 header length, key=value header (config echo,
// vocabulary, answer list, one `tensor=` index line per stored tensor, CRC32
// of the blob), then the f32 little-endian tensors in index order.
// Parameters come first in registration order, then BN running statistics.
// Predicted kernels are never stored.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "qghc/run_config.hpp"

namespace qghc {

inline constexpr std::string_view kCheckpointMagic = "QCK1";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::vector<std::string> vocab;
  std::vector<std::string> answers;
  std::unique_ptr<VqaModel> model;
};

namespace detail {

struct TensorEntry {
  std::string name;
  std::string role;  // QD, QI or STAT
  Shape shape;
  std::size_t offset = 0;
};

inline std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out.empty() ? "scalar" : out;
}

inline Shape parse_shape_field(const std::string& f) {
  if (f == "scalar") return {};
  Shape s;
  for (const auto& p : io::split(f, 'x')) {
    try {
      std::size_t used = 0;
      s.push_back(std::stoull(p, &used));
      if (used != p.size()) throw std::invalid_argument(p);
    } catch (const std::exception&) {
      throw FormatError("header", "bad tensor shape '" + f + "'");
    }
  }
  return s;
}

template <class F>
void for_each_stored(VqaModel& model, F&& f) {
  for (const auto& p : model.registry().parameters()) f(p.name, std::string(role_name(p.role)), p.var);
  for (const auto& b : model.registry().buffers()) f(b.name, std::string("STAT"), b.var);
}

}  // namespace detail

inline std::string serialize_checkpoint(VqaModel& model, const RunConfig& rc, const std::vector<std::string>& vocab,
                                        const std::vector<std::string>& answers) {
  io::Writer blob;
  std::string index;
  detail::for_each_stored(model, [&](const std::string& name, const std::string& role, const Var<float>& v) {
    index += "tensor=" + name + " " + role + " " + detail::shape_field(v.shape()) + " " +
             std::to_string(blob.str().size()) + "\n";
    for (float x : v.value().data()) blob.f32(x);
  });
  std::string header = "version=" + std::to_string(kCheckpointVersion) + "\n";
  for (const auto& [k, v] : config_map(rc)) header += "config." + k + "=" + v + "\n";
  header += "vocab=" + io::join(vocab, ',') + "\n";
  header += "answers=" + io::join(answers, ',') + "\n";
  header += index;
  header += "crc32=" + io::hex32(io::crc32(blob.str())) + "\n";
  io::Writer w;
  w.bytes(kCheckpointMagic);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header);
  w.bytes(blob.str());
  return std::move(w.str());
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  io::Reader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != kCheckpointMagic) throw FormatError("magic", "not a QCK1 checkpoint (bad magic)");
  const std::uint32_t hlen = r.u32();
  const std::string_view header = r.bytes(hlen);
  const std::string_view blob = r.rest();

  Checkpoint ck;
  std::string config_text, crc;
  bool have_version = false, have_vocab = false, have_answers = false;
  std::vector<detail::TensorEntry> entries;
  for (auto& [k, v] : io::parse_kv_lines(header, "checkpoint header")) {
    if (k == "version") {
      if (v != std::to_string(kCheckpointVersion)) throw FormatError("header", "unsupported checkpoint version " + v);
      have_version = true;
    } else if (k.rfind("config.", 0) == 0) {
      config_text += k.substr(7) + "=" + v + "\n";
    } else if (k == "vocab") {
      ck.vocab = io::split(v, ',');
      have_vocab = true;
    } else if (k == "answers") {
      ck.answers = io::split(v, ',');
      have_answers = true;
    } else if (k == "tensor") {
      const auto f = io::split(v, ' ');
      if (f.size() != 4) throw FormatError("header", "malformed tensor line '" + v + "'");
      detail::TensorEntry e{f[0], f[1], detail::parse_shape_field(f[2]), 0};
      try {
        e.offset = std::stoull(f[3]);
      } catch (const std::exception&) {
        throw FormatError("header", "bad tensor offset in '" + v + "'");
      }
      entries.push_back(std::move(e));
    } else if (k == "crc32") {
      crc = v;
    } else {
      throw FormatError("header", "unknown checkpoint header key '" + k + "'");
    }
  }
  if (!have_version || !have_vocab || !have_answers || crc.empty())
    throw FormatError("header", "checkpoint header incomplete");
  if (io::hex32(io::crc32(blob)) != crc) throw FormatError("checksum", "checkpoint CRC32 mismatch");

  try {
    ck.config = parse_run_config(config_text);
  } catch (const ConfigError& e) {
    throw FormatError("header", std::string("checkpoint config: ") + e.what());
  }
  ck.config.model.vocab = ck.vocab.size();
  ck.config.model.answers = ck.answers.size();
  ck.model = std::make_unique<VqaModel>(ck.config.model, ck.config.train.seed);

  std::map<std::string, const detail::TensorEntry*> by_name;
  for (const auto& e : entries)
    if (!by_name.emplace(e.name, &e).second) throw FormatError("header", "tensor '" + e.name + "' stored twice");
  std::size_t expected_offset = 0, used = 0;
  detail::for_each_stored(*ck.model, [&](const std::string& name, const std::string& role, Var<float> v) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("header", "checkpoint is missing tensor '" + name + "'");
    const auto& e = *it->second;
    if (e.role != role || e.shape != v.shape())
      throw FormatError("header", "tensor '" + name + "' is " + e.role + " " + shape_str(e.shape) + ", model expects " +
                                      role + " " + shape_str(v.shape()));
    if (e.offset != expected_offset) throw FormatError("header", "tensor '" + name + "' at unexpected offset");
    io::Reader br(blob.substr(std::min(blob.size(), e.offset)));
    for (auto& x : v.mutable_value().data()) x = br.f32();
    expected_offset += 4 * v.numel();
    ++used;
  });
  if (used != entries.size()) throw FormatError("header", "checkpoint holds tensors the model does not have");
  if (expected_offset != blob.size()) throw FormatError("trailing", "checkpoint blob size does not match its index");
  return ck;
}

inline void save_checkpoint(const std::string& path, VqaModel& model, const RunConfig& rc,
                            const std::vector<std::string>& vocab, const std::vector<std::string>& answers) {
  io::write_file(path, serialize_checkpoint(model, rc, vocab, answers));
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(io::read_file(path)); }

// Datasets and checkpoints must agree on both word lists.
inline void check_compatible(const Checkpoint& ck, const data::Dataset& ds) {
  if (ck.vocab != ds.vocab) throw FormatError("vocab_mismatch", "dataset vocabulary differs from the checkpoint's");
  if (ck.answers != ds.answers) throw FormatError("vocab_mismatch", "dataset answer list differs from the checkpoint's");
}

}  // namespace qghc
