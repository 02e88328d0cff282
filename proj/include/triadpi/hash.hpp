#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>

namespace triadpi {

/// Git blob object id: hex SHA-1 of "blob <size>\0" followed by the content.
std::string git_blob_sha1(std::span<const std::byte> content);
std::string git_blob_sha1_file(const std::filesystem::path& path);

/// Plain hex SHA-1 of a file's bytes.
std::string sha1_file(const std::filesystem::path& path);

}  // namespace triadpi
