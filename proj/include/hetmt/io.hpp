#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace hetmt::io {

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

std::vector<char> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const char> bytes);

/// Creates the directory (and parents); IoError on failure.
void ensure_dir(const std::filesystem::path& dir);

/// Strips a trailing ".json" or ".bin" so either file names the same stem.
std::filesystem::path stem_path(const std::filesystem::path& p);

}  // namespace hetmt::io
