#pragma once

// Text run configuration: one key=value per line, # comments allowed.
// Unknown keys are rejected; emit_run_config() writes every key sorted.

#include <charconv>
#include <map>
#include <string>

#include "qghc/training.hpp"

namespace qghc {

// Names accepted on the command line and in config files.
inline const char* kVariantChoices = "qghc, naive, full, group, concat, blind";

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  // qghc | naive | full | group | concat | blind
  std::string variant_label() const {
    switch (model.fusion) {
      case Fusion::blind: return "blind";
      case Fusion::concat_baseline: return "concat";
      default: break;
    }
    return model.variant == Variant::hybrid ? "qghc" : variant_name(model.variant);
  }

  // Keeps the qghc+concat choice when switching between stack variants.
  void set_variant(const std::string& v) {
    const bool concat_q = model.fusion == Fusion::qghc_concat;
    if (v == "blind") {
      model.fusion = Fusion::blind;
    } else if (v == "concat") {
      model.fusion = Fusion::concat_baseline;
    } else if (v == "qghc" || v == "naive" || v == "full" || v == "group") {
      model.variant = parse_variant(v);
      model.fusion = concat_q ? Fusion::qghc_concat : Fusion::qghc;
    } else {
      throw UsageError("unknown variant '" + v + "' (expected one of: " + kVariantChoices + ")");
    }
  }
};

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " expects true or false, got '" + v + "'");
}

inline std::string fmt_double(double d) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

}  // namespace detail

inline void set_config_key(RunConfig& rc, const std::string& key, const std::string& v) {
  using detail::parse_size;
  ModelConfig& m = rc.model;
  TrainConfig& t = rc.train;
  if (key == "enc1") m.enc1 = parse_size(key, v);
  else if (key == "enc2") m.enc2 = parse_size(key, v);
  else if (key == "embed") m.embed = parse_size(key, v);
  else if (key == "question_hidden") m.question_hidden = parse_size(key, v);
  else if (key == "channels") m.qghc.in_channels = m.qghc.out_channels = parse_size(key, v);
  else if (key == "groups") m.qghc.groups = parse_size(key, v);
  else if (key == "dynamic_groups") m.qghc.dynamic_groups = parse_size(key, v);
  else if (key == "mid_per_group") m.qghc.mid_per_group = parse_size(key, v);
  else if (key == "predictor_hidden") m.qghc.hidden = parse_size(key, v);
  else if (key == "modules") m.qghc.modules = parse_size(key, v);
  else if (key == "dynamic_indices") {
    m.qghc.dynamic_group_indices.clear();
    if (!v.empty())
      for (const auto& part : io::split(v, ',')) m.qghc.dynamic_group_indices.push_back(parse_size(key, io::trim(part)));
  } else if (key == "index_seed") {
    if (v.empty() || v == "none") m.qghc.index_seed.reset();
    else m.qghc.index_seed = parse_size(key, v);
  } else if (key == "variant") rc.set_variant(v);
  else if (key == "concat_question") {
    const bool c = detail::parse_bool(key, v);
    if (m.fusion == Fusion::qghc || m.fusion == Fusion::qghc_concat) m.fusion = c ? Fusion::qghc_concat : Fusion::qghc;
    else if (c) throw ConfigError("config: concat_question needs a qghc-stack variant");
  } else if (key == "head") {
    if (v == "gap") m.head = Head::gap;
    else if (v == "attention") m.head = Head::attention;
    else throw ConfigError("config: head expects gap or attention, got '" + v + "'");
  } else if (key == "epochs") t.epochs = parse_size(key, v);
  else if (key == "batch_size") t.batch_size = parse_size(key, v);
  else if (key == "lr") t.lr = detail::parse_double(key, v);
  else if (key == "seed") t.seed = parse_size(key, v);
  else if (key == "eval_every") t.eval_every = parse_size(key, v);
  else if (key == "timing") t.log_timing = detail::parse_bool(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

// Order of application does not matter except that `variant` must precede
// `concat_question`; parse() handles that.
inline RunConfig parse_run_config(std::string_view text) {
  RunConfig rc;
  std::map<std::string, std::string> kv;
  for (auto& [k, v] : io::parse_kv_lines(text, "config")) {
    if (!kv.emplace(k, v).second) throw ConfigError("config: duplicate key '" + k + "'");
  }
  if (auto it = kv.find("variant"); it != kv.end()) set_config_key(rc, it->first, it->second);
  for (const auto& [k, v] : kv)
    if (k != "variant") set_config_key(rc, k, v);
  return rc;
}

inline RunConfig load_run_config(const std::string& path) { return parse_run_config(io::read_file(path)); }

inline std::map<std::string, std::string> config_map(const RunConfig& rc) {
  const ModelConfig& m = rc.model;
  const TrainConfig& t = rc.train;
  std::string idx;
  for (std::size_t i = 0; i < m.qghc.dynamic_group_indices.size(); ++i)
    idx += (i ? "," : "") + std::to_string(m.qghc.dynamic_group_indices[i]);
  return {
      {"batch_size", std::to_string(t.batch_size)},
      {"channels", std::to_string(m.qghc.in_channels)},
      {"concat_question", m.fusion == Fusion::qghc_concat ? "true" : "false"},
      {"dynamic_groups", std::to_string(m.qghc.dynamic_groups)},
      {"dynamic_indices", idx},
      {"embed", std::to_string(m.embed)},
      {"enc1", std::to_string(m.enc1)},
      {"enc2", std::to_string(m.enc2)},
      {"epochs", std::to_string(t.epochs)},
      {"eval_every", std::to_string(t.eval_every)},
      {"groups", std::to_string(m.qghc.groups)},
      {"head", m.head == Head::attention ? "attention" : "gap"},
      {"index_seed", m.qghc.index_seed ? std::to_string(*m.qghc.index_seed) : "none"},
      {"lr", detail::fmt_double(t.lr)},
      {"mid_per_group", std::to_string(m.qghc.mid_per_group)},
      {"modules", std::to_string(m.qghc.modules)},
      {"predictor_hidden", std::to_string(m.qghc.hidden)},
      {"question_hidden", std::to_string(m.question_hidden)},
      {"seed", std::to_string(t.seed)},
      {"timing", t.log_timing ? "true" : "false"},
      {"variant", rc.variant_label()},
  };
}

inline std::string emit_run_config(const RunConfig& rc) {
  std::string s;
  for (const auto& [k, v] : config_map(rc)) s += k + "=" + v + "\n";
  return s;
}

}  // namespace qghc
