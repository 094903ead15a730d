#include "config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <toml.hpp>

namespace mixfit::cli {
namespace {

std::string join_lines(const std::vector<std::string>& problems) {
  std::string out;
  for (const auto& p : problems) out += (out.empty() ? "" : "\n") + p;
  return out;
}

Json from_toml(const toml::node& node, const std::string& path, std::map<std::string, int>& lines) {
  lines[path] = static_cast<int>(node.source().begin.line);
  if (const auto* t = node.as_table()) {
    Json obj = Json::object();
    for (const auto& [k, v] : *t) {
      const std::string key(k.str());
      obj[key] = from_toml(v, path.empty() ? key : path + "." + key, lines);
    }
    return obj;
  }
  if (const auto* a = node.as_array()) {
    Json arr = Json::array();
    for (std::size_t i = 0; i < a->size(); ++i) {
      arr.push_back(from_toml(*a->get(i), path + "[" + std::to_string(i) + "]", lines));
    }
    return arr;
  }
  if (const auto* s = node.as_string()) return Json(s->get());
  if (const auto* i = node.as_integer()) return Json(i->get());
  if (const auto* f = node.as_floating_point()) return Json(f->get());
  if (const auto* b = node.as_boolean()) return Json(b->get());
  return Json(node.is_date_time() || node.is_date() || node.is_time() ? "<date>" : "<unknown>");
}

}  // namespace

ConfigError::ConfigError(const std::vector<std::string>& problems)
    : std::runtime_error(join_lines(problems)), problems_(problems) {}

Config Config::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError({path + ": cannot open config file"});
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  Config c;
  c.path_ = path;
  if (std::filesystem::path(path).extension() == ".json") {
    try {
      c.root_ = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      // Translate the byte offset into a line number.
      const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
      const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n');
      throw ConfigError({path + ":" + std::to_string(line) + ": JSON syntax error: " + e.what()});
    }
  } else {
    try {
      const toml::table table = toml::parse(text, path);
      c.root_ = from_toml(table, "", c.lines_);
    } catch (const toml::parse_error& e) {
      throw ConfigError({path + ":" + std::to_string(e.source().begin.line) +
                         ": TOML syntax error: " + std::string(e.description())});
    }
  }
  if (!c.root_.is_object()) throw ConfigError({path + ": top level must be a table/object"});
  return c;
}

Config Config::from_json(Json root, std::string origin) {
  Config c;
  c.root_ = std::move(root);
  c.path_ = std::move(origin);
  if (!c.root_.is_object()) throw ConfigError({c.path_ + ": top level must be an object"});
  return c;
}

std::string Config::directory() const {
  const auto parent = std::filesystem::path(path_).parent_path();
  return parent.empty() ? std::string(".") : parent.string();
}

std::string Config::where(const std::string& key) const {
  auto it = lines_.find(key);
  std::string loc = path_;
  if (it != lines_.end()) loc += ":" + std::to_string(it->second);
  return loc + ": field '" + key + "'";
}

void Config::problem(const std::string& key, const std::string& message) {
  problems_.push_back(where(key) + ": " + message);
}

const Json* Config::find(const std::string& key) const {
  auto it = root_.find(key);
  return it == root_.end() ? nullptr : &*it;
}

bool Config::has(const std::string& key) const { return find(key) != nullptr; }

std::int64_t Config::integer(const std::string& key, std::int64_t fallback, std::int64_t min,
                             std::int64_t max) {
  const Json* v = find(key);
  if (v == nullptr) return fallback;
  if (!v->is_number_integer()) {
    problem(key, "expected an integer");
    return fallback;
  }
  const auto x = v->get<std::int64_t>();
  if (x < min || x > max) {
    problem(key, "must lie in [" + std::to_string(min) + ", " + std::to_string(max) + "], got " +
                     std::to_string(x));
    return fallback;
  }
  return x;
}

std::int64_t Config::required_integer(const std::string& key, std::int64_t min, std::int64_t max) {
  if (!has(key)) {
    problem(key, "is required");
    return min;
  }
  return integer(key, min, min, max);
}

double Config::number(const std::string& key, double fallback, double min, double max) {
  const Json* v = find(key);
  if (v == nullptr) return fallback;
  if (!v->is_number()) {
    problem(key, "expected a number");
    return fallback;
  }
  const double x = v->get<double>();
  if (!std::isfinite(x) || x < min || x > max) {
    std::ostringstream msg;
    msg << "must lie in [" << min << ", " << max << "], got " << x;
    problem(key, msg.str());
    return fallback;
  }
  return x;
}

bool Config::boolean(const std::string& key, bool fallback) {
  const Json* v = find(key);
  if (v == nullptr) return fallback;
  if (!v->is_boolean()) {
    problem(key, "expected true or false");
    return fallback;
  }
  return v->get<bool>();
}

std::string Config::string(const std::string& key, const std::string& fallback) {
  const Json* v = find(key);
  if (v == nullptr) return fallback;
  if (!v->is_string()) {
    problem(key, "expected a string");
    return fallback;
  }
  return v->get<std::string>();
}

std::string Config::choice(const std::string& key, const std::string& fallback,
                           const std::set<std::string>& allowed) {
  const std::string s = string(key, fallback);
  if (!allowed.count(s)) {
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    problem(key, "must be one of {" + list + "}, got '" + s + "'");
    return fallback;
  }
  return s;
}

std::vector<std::int64_t> Config::integers(const std::string& key,
                                           std::vector<std::int64_t> fallback, std::int64_t min,
                                           std::int64_t max) {
  const Json* v = find(key);
  if (v == nullptr) return fallback;
  if (!v->is_array() || v->empty()) {
    problem(key, "expected a non-empty array of integers");
    return fallback;
  }
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < v->size(); ++i) {
    const Json& e = (*v)[i];
    const std::string sub = key + "[" + std::to_string(i) + "]";
    if (!e.is_number_integer()) {
      problem(sub, "expected an integer");
      return fallback;
    }
    const auto x = e.get<std::int64_t>();
    if (x < min || x > max) {
      problem(sub, "must lie in [" + std::to_string(min) + ", " + std::to_string(max) + "]");
      return fallback;
    }
    out.push_back(x);
  }
  return out;
}

std::vector<std::string> Config::strings(const std::string& key, std::vector<std::string> fallback,
                                         const std::set<std::string>& allowed) {
  const Json* v = find(key);
  if (v == nullptr) return fallback;
  if (!v->is_array() || v->empty()) {
    problem(key, "expected a non-empty array of strings");
    return fallback;
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < v->size(); ++i) {
    const Json& e = (*v)[i];
    const std::string sub = key + "[" + std::to_string(i) + "]";
    if (!e.is_string() || !allowed.count(e.get<std::string>())) {
      problem(sub, "unsupported value");
      return fallback;
    }
    out.push_back(e.get<std::string>());
  }
  return out;
}

std::vector<Json> Config::tables(const std::string& key) {
  const Json* v = find(key);
  if (v == nullptr) {
    problem(key, "is required");
    return {};
  }
  if (!v->is_array()) {
    problem(key, "expected an array of tables");
    return {};
  }
  std::vector<Json> out;
  for (std::size_t i = 0; i < v->size(); ++i) {
    if (!(*v)[i].is_object()) {
      problem(key + "[" + std::to_string(i) + "]", "expected a table");
      continue;
    }
    out.push_back((*v)[i]);
  }
  return out;
}

void Config::allow_only(const std::set<std::string>& allowed) {
  for (auto it = root_.begin(); it != root_.end(); ++it) {
    if (!allowed.count(it.key())) problem(it.key(), "unknown setting");
  }
}

void Config::finish() const {
  if (!problems_.empty()) throw ConfigError(problems_);
}

}  // namespace mixfit::cli
