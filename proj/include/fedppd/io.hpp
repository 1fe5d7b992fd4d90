#ifndef FEDPPD_IO_HPP
#define FEDPPD_IO_HPP

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "fedppd/error.hpp"

namespace fedppd {

namespace detail {

inline void dump_value(std::ostream& out, const nlohmann::json& j, int indent, int depth) {
  const auto nl = [&](int d) {
    if (indent < 0) return;
    out << '\n' << std::string(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (j.type()) {
    case nlohmann::json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) {
        out << "null";
        break;
      }
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf;
      break;
    }
    case nlohmann::json::value_t::object: {
      if (j.empty()) {
        out << "{}";
        break;
      }
      out << '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out << ',';
        first = false;
        nl(depth + 1);
        out << nlohmann::json(it.key()).dump() << (indent < 0 ? ":" : ": ");
        dump_value(out, it.value(), indent, depth + 1);
      }
      nl(depth);
      out << '}';
      break;
    }
    case nlohmann::json::value_t::array: {
      if (j.empty()) {
        out << "[]";
        break;
      }
      out << '[';
      bool first = true;
      for (const auto& v : j) {
        if (!first) out << ',';
        first = false;
        // Numeric arrays stay on one line.
        if (!v.is_primitive()) nl(depth + 1);
        dump_value(out, v, indent, depth + 1);
      }
      if (!j.front().is_primitive()) nl(depth);
      out << ']';
      break;
    }
    default:
      out << j.dump();
  }
}

}  // namespace detail

// JSON text with every floating-point value written at 17 significant digits.
// indent < 0 gives a single line.
inline std::string dump_json(const nlohmann::json& j, int indent = -1) {
  std::ostringstream out;
  detail::dump_value(out, j, indent, 0);
  return out.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

inline void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << line << '\n';
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace fedppd

#endif  // FEDPPD_IO_HPP
