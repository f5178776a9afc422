#pragma once

// Flat `key = value` run configuration. Keys are exactly the TsvitConfig and
// TrainConfig field names; '#' starts a comment; unknown keys are errors.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "tsvit/model.hpp"
#include "tsvit/train.hpp"

namespace tsvit {

struct RunConfig {
  TsvitConfig model;
  TrainConfig train;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& v) {
  N out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("'" + v + "' is not a valid number");
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + v + "' is not a boolean (true/false)");
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& in, const std::string& source = "<config>") {
  RunConfig rc;
  auto& m = rc.model;
  auto& t = rc.train;
  using Setter = std::function<void(const std::string&)>;
  auto u32 = [](std::uint32_t& f) -> Setter { return [&f](const std::string& v) { f = detail::parse_number<std::uint32_t>(v); }; };
  auto f32 = [](float& f) -> Setter { return [&f](const std::string& v) { f = detail::parse_number<float>(v); }; };
  auto f64 = [](double& f) -> Setter { return [&f](const std::string& v) { f = detail::parse_number<double>(v); }; };
  auto flag = [](bool& f) -> Setter { return [&f](const std::string& v) { f = detail::parse_bool(v); }; };
  const std::map<std::string, Setter> setters{
      {"signal_length", u32(m.signal_length)},
      {"channels", u32(m.channels)},
      {"patch_length", u32(m.patch_length)},
      {"embed_dim", u32(m.embed_dim)},
      {"heads", u32(m.heads)},
      {"blocks", u32(m.blocks)},
      {"mlp_dim", u32(m.mlp_dim)},
      {"num_classes", u32(m.num_classes)},
      {"encoder_dropout", f32(m.encoder_dropout)},
      {"embedding_dropout", f32(m.embedding_dropout)},
      {"use_position_embedding", flag(m.use_position_embedding)},
      {"use_post_embedding_dropout", flag(m.use_post_embedding_dropout)},
      {"learning_rate", f64(t.learning_rate)},
      {"batch_size", u32(t.batch_size)},
      {"epochs", u32(t.epochs)},
      {"seed", [&t](const std::string& v) { t.seed = detail::parse_number<std::uint64_t>(v); }},
      {"trials", u32(t.trials)},
      {"beta1", f64(t.beta1)},
      {"beta2", f64(t.beta2)},
      {"adam_eps", f64(t.adam_eps)},
      {"deterministic", flag(t.deterministic)},
      {"standardize", flag(t.standardize)},
  };

  std::set<std::string> seen;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto where = source + ":" + std::to_string(lineno) + ": ";
    const auto hash = line.find('#');
    const std::string body = detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      it->second(value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  try {
    rc.model.validate();
    rc.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return rc;
}

inline RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>") {
  std::istringstream in(text);
  return parse_run_config(in, source);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_run_config(in, path.string());
}

}  // namespace tsvit
