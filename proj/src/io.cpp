#include "dselect/io.hpp"

#include <atomic>
#include <cerrno>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <system_error>
#include <unistd.h>

#include "dselect/error.hpp"

namespace dselect::io {

namespace fs = std::filesystem;

void write_text_atomic(const fs::path& path, const std::string& content) {
  static std::atomic<unsigned> counter{0};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw Error("failed writing " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

double parse_double(const std::string& text) {
  const std::string t = trim(text);
  double value = 0.0;
  const char* first = t.data();
  const char* last = t.data() + t.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || t.empty()) {
    // from_chars rejects "inf"/"nan" spellings on some libraries; strtod does not.
    char* end = nullptr;
    errno = 0;
    value = std::strtod(t.c_str(), &end);
    if (t.empty() || end != t.c_str() + t.size()) throw ConfigError("not a number: '" + text + "'");
  }
  return value;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& text) {
  const auto b = text.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = text.find_last_not_of(" \t\r\n");
  return text.substr(b, e - b + 1);
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  std::string out = "dselect-checkpoint 1\n";
  for (const auto& [name, value] : checkpoint.meta) out += "meta " + name + " " + format_double(value) + "\n";
  for (const auto& [name, t] : checkpoint.tensors) {
    out += "tensor " + name + " " + std::to_string(t.rank());
    for (std::size_t d : t.shape()) out += " " + std::to_string(d);
    out += "\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (i) out += ' ';
      out += format_double(t[i]);
    }
    out += "\n";
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "dselect-checkpoint 1") throw Error("not a checkpoint file");
  Checkpoint out;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream head(line);
    std::string kind, name;
    head >> kind >> name;
    if (kind == "meta") {
      std::string value;
      head >> value;
      out.meta[name] = parse_double(value);
    } else if (kind == "tensor") {
      std::size_t rank = 0;
      if (!(head >> rank)) throw Error("checkpoint: bad tensor header for '" + name + "'");
      Shape shape(rank);
      for (auto& d : shape) {
        if (!(head >> d)) throw Error("checkpoint: bad tensor header for '" + name + "'");
      }
      std::string values_line;
      if (!std::getline(in, values_line)) throw Error("checkpoint: missing values for '" + name + "'");
      std::istringstream vs(values_line);
      std::vector<double> values;
      std::string token;
      while (vs >> token) values.push_back(parse_double(token));
      out.tensors.emplace(name, Tensor(shape, std::move(values)));
    } else {
      throw Error("checkpoint: unexpected line '" + line + "'");
    }
  }
  return out;
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  write_text_atomic(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const fs::path& path) { return parse_checkpoint(read_text(path)); }

}  // namespace dselect::io
