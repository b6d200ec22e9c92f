#pragma once

// File output helpers. Every writer goes through write_text_atomic: the
// content lands in a temporary sibling file that is renamed over the target,
// so an interrupted run never leaves a truncated file behind.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dselect/tensor.hpp"

namespace dselect::io {

void write_text_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_text(const std::filesystem::path& path);

// Shortest text that reads back to the same double (17 significant digits).
std::string format_double(double value);
double parse_double(const std::string& text);  // ConfigError on malformed input

std::vector<std::string> split(const std::string& text, char sep);
std::string trim(const std::string& text);

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, double> meta;
};

// Text format: a "dselect-checkpoint 1" line, then "meta <name> <value>"
// lines, then per tensor a "tensor <name> <rank> <dims...>" line followed by
// one line of row-major values.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(const std::string& text);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dselect::io
