#pragma once

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <string>

namespace crowdsplat {

// Calls write(tmp) on a sibling temp path, then renames it over `path`.
// Parent directories are created as needed.
void write_atomically(const std::filesystem::path& path,
                      const std::function<void(const std::filesystem::path&)>& write);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

// Pretty-printed JSON with a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace crowdsplat
