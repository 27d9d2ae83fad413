#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace revprag {

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view content);

} // namespace revprag
