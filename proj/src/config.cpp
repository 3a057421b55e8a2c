#include "mtuda/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "mtuda/error.hpp"

using nlohmann::json;

namespace mtuda {

namespace {

class LineParser {
 public:
  LineParser(std::string_view text, std::string origin, int line) : s_(text), origin_(std::move(origin)), line_(line) {}

  [[noreturn]] void fail(const std::string& msg) const {
    throw Error(ErrorKind::config, origin_ + ":" + std::to_string(line_) + ": " + msg);
  }

  void skip_space() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }
  bool at_end_or_comment() {
    skip_space();
    return pos_ >= s_.size() || s_[pos_] == '#';
  }
  bool eat(char c) {
    skip_space();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  std::string key() {
    skip_space();
    const auto start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' || s_[pos_] == '-'))
      ++pos_;
    if (pos_ == start) fail("expected a key");
    return std::string(s_.substr(start, pos_ - start));
  }

  std::vector<std::string> dotted_key() {
    std::vector<std::string> parts{key()};
    while (eat('.')) parts.push_back(key());
    return parts;
  }

  json value() {
    skip_space();
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') return string();
    if (c == '[') {
      ++pos_;
      json arr = json::array();
      if (eat(']')) return arr;
      do {
        arr.push_back(value());
      } while (eat(','));
      if (!eat(']')) fail("unterminated array");
      return arr;
    }
    const auto start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != '#' && s_[pos_] != ' ' &&
           s_[pos_] != '\t')
      ++pos_;
    const std::string tok(s_.substr(start, pos_ - start));
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string digits;
    for (char ch : tok)
      if (ch != '_') digits += ch;
    if (digits.find_first_of(".eE") == std::string::npos || digits.find_first_of("xX") != std::string::npos) {
      std::int64_t i = 0;
      const auto r = std::from_chars(digits.data(), digits.data() + digits.size(), i);
      if (r.ec == std::errc() && r.ptr == digits.data() + digits.size()) return i;
    }
    double d = 0.0;
    const auto r = std::from_chars(digits.data(), digits.data() + digits.size(), d);
    if (r.ec != std::errc() || r.ptr != digits.data() + digits.size() || digits.empty())
      fail("cannot parse value '" + tok + "'");
    return d;
  }

 private:
  json string() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      if (s_[pos_] == '\\' && pos_ + 1 < s_.size()) {
        const char e = s_[++pos_];
        out += e == 'n' ? '\n' : e == 't' ? '\t' : e;
      } else {
        out += s_[pos_];
      }
      ++pos_;
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  std::string_view s_;
  std::string origin_;
  int line_;
  std::size_t pos_ = 0;
};

json& descend(json& root, const std::vector<std::string>& path, const LineParser& p) {
  json* node = &root;
  for (const auto& part : path) {
    if (node->is_array()) {
      if (node->empty()) p.fail("empty table array");
      node = &node->back();
    }
    if (!node->is_object()) p.fail("'" + part + "' is not a table");
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
  }
  return *node;
}

void format_table(std::ostringstream& out, const json& table, const std::string& prefix) {
  std::vector<std::pair<std::string, const json*>> sub, arrays;
  for (const auto& [k, v] : table.items()) {
    if (v.is_object()) {
      sub.emplace_back(k, &v);
    } else if (v.is_array() && !v.empty() && v.front().is_object()) {
      arrays.emplace_back(k, &v);
    } else {
      out << k << " = " << v.dump() << "\n";
    }
  }
  for (const auto& [k, v] : arrays)
    for (const auto& item : *v) {
      out << "\n[[" << prefix << k << "]]\n";
      format_table(out, item, prefix + k + ".");
    }
  for (const auto& [k, v] : sub) {
    out << "\n[" << prefix << k << "]\n";
    format_table(out, *v, prefix + k + ".");
  }
}

}  // namespace

json parse_config_text(const std::string& text, const std::string& origin) {
  json root = json::object();
  json* current = &root;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    LineParser p(raw, origin, line);
    if (p.at_end_or_comment()) continue;
    if (p.eat('[')) {
      const bool array_table = p.eat('[');
      const auto path = p.dotted_key();
      if (!p.eat(']') || (array_table && !p.eat(']'))) p.fail("malformed table header");
      if (!p.at_end_or_comment()) p.fail("trailing characters after table header");
      if (array_table) {
        std::vector<std::string> parent(path.begin(), path.end() - 1);
        json& holder = descend(root, parent, p);
        json& arr = holder[path.back()];
        if (arr.is_null()) arr = json::array();
        if (!arr.is_array()) p.fail("'" + path.back() + "' is not a table array");
        arr.push_back(json::object());
        current = &arr.back();
      } else {
        current = &descend(root, path, p);
        if (current->is_array()) current = &current->back();
      }
      continue;
    }
    const auto path = p.dotted_key();
    if (!p.eat('=')) p.fail("expected '='");
    json v = p.value();
    if (!p.at_end_or_comment()) p.fail("trailing characters after value");
    std::vector<std::string> parent(path.begin(), path.end() - 1);
    json& table = descend(*current, parent, p);
    if (table.contains(path.back())) p.fail("duplicate key '" + path.back() + "'");
    table[path.back()] = std::move(v);
  }
  return root;
}

json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::config, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

std::string format_config_text(const json& tree) {
  std::ostringstream out;
  format_table(out, tree, "");
  std::string s = out.str();
  if (!s.empty() && s.front() == '\n') s.erase(0, 1);
  return s;
}

namespace {

json style_json(const DomainStyle& s) {
  return {{"gain", s.gain}, {"bias", s.bias}, {"texture_frequency", s.texture_frequency},
          {"texture_amplitude", s.texture_amplitude}, {"noise_sigma", s.noise_sigma}};
}

DomainStyle style_from(const json& j, DomainStyle s, const char* name) {
  require(j.is_object(), ErrorKind::config, std::string("[synthetic.") + name + "] must be a table");
  for (const auto& [k, v] : j.items()) {
    if (k == "gain") s.gain = v.get<double>();
    else if (k == "bias") s.bias = v.get<double>();
    else if (k == "texture_frequency") s.texture_frequency = v.get<double>();
    else if (k == "texture_amplitude") s.texture_amplitude = v.get<double>();
    else if (k == "noise_sigma") s.noise_sigma = v.get<double>();
    else throw Error(ErrorKind::config, "unknown key '" + k + "' in [synthetic." + name + "]");
  }
  return s;
}

}  // namespace

json synthetic_to_json(const SyntheticConfig& c) {
  return {{"image_size", c.image_size},
          {"cases", c.cases},
          {"slices_per_case", c.slices_per_case},
          {"lesion_count_min", c.lesion_count_min},
          {"lesion_count_max", c.lesion_count_max},
          {"lesion_radius_min", c.lesion_radius_min},
          {"lesion_radius_max", c.lesion_radius_max},
          {"vessel_count", c.vessel_count},
          {"tissue_level", c.tissue_level},
          {"vessel_level", c.vessel_level},
          {"lesion_level", c.lesion_level},
          {"source", style_json(c.source)},
          {"target", style_json(c.target)}};
}

SyntheticConfig synthetic_from_json(const json& j) {
  SyntheticConfig c;
  require(j.is_object(), ErrorKind::config, "[synthetic] must be a table");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "image_size") c.image_size = v.get<int>();
      else if (k == "cases") c.cases = v.get<int>();
      else if (k == "slices_per_case") c.slices_per_case = v.get<int>();
      else if (k == "lesion_count_min") c.lesion_count_min = v.get<int>();
      else if (k == "lesion_count_max") c.lesion_count_max = v.get<int>();
      else if (k == "lesion_radius_min") c.lesion_radius_min = v.get<double>();
      else if (k == "lesion_radius_max") c.lesion_radius_max = v.get<double>();
      else if (k == "vessel_count") c.vessel_count = v.get<int>();
      else if (k == "tissue_level") c.tissue_level = v.get<double>();
      else if (k == "vessel_level") c.vessel_level = v.get<double>();
      else if (k == "lesion_level") c.lesion_level = v.get<double>();
      else if (k == "source") c.source = style_from(v, c.source, "source");
      else if (k == "target") c.target = style_from(v, c.target, "target");
      else throw Error(ErrorKind::config, "unknown key '" + k + "' in [synthetic]");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("[synthetic]: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace mtuda
