#include "run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace vrwkv::cli {
namespace {

using nlohmann::json;

std::string option_key(const CLI::Option& opt) {
  const auto& names = opt.get_lnames();
  return names.empty() ? std::string() : names.front();
}

bool skipped(const std::string& key) { return key.empty() || key == "config" || key == "out" || key == "help"; }

json typed(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  if (!s.empty()) {
    long long i = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), i);
    if (ec == std::errc() && p == s.data() + s.size()) return i;
    std::size_t used = 0;
    try {
      const double d = std::stod(s, &used);
      if (used == s.size()) return d;
    } catch (const std::exception&) {
    }
  }
  return s;
}

std::string as_text(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) {
    std::ostringstream s;
    s.precision(17);
    s << v.get<double>();
    return s.str();
  }
  throw CLI::ValidationError("--config", "key '" + key + "' must be a string, number or boolean");
}

}  // namespace

void apply_config_file(CLI::App& app, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw CLI::ValidationError("--config", "cannot open '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    throw CLI::ValidationError("--config", std::string("invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw CLI::ValidationError("--config", "expected a flat JSON object");
  for (const auto& [key, value] : doc.items()) {
    CLI::Option* opt = skipped(key) ? nullptr : app.get_option_no_throw("--" + key);
    if (!opt) throw CLI::ValidationError("--config", "unknown key '" + key + "'");
    if (opt->count() > 0) continue;
    opt->add_result(as_text(value, key));
    opt->run_callback();
  }
}

json resolved_config(const CLI::App& app) {
  json out = json::object();
  for (const CLI::Option* opt : app.get_options()) {
    const std::string key = option_key(*opt);
    if (skipped(key)) continue;
    if (opt->count() > 0) {
      out[key] = typed(opt->results().back());
    } else if (!opt->get_default_str().empty()) {
      out[key] = typed(opt->get_default_str());
    }
  }
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size())
      throw CLI::ValidationError("list", "'" + text + "' is not a comma-separated list of counts");
    values.push_back(v);
  }
  if (values.empty()) throw CLI::ValidationError("list", "empty list");
  return values;
}

}  // namespace vrwkv::cli
