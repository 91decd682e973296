#pragma once

// Minimal ZIP archive writer/reader (deflate via zlib). Covers what bundles
// need: flat file entries, no encryption, no zip64.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace avp {

class ZipWriter {
  public:
    explicit ZipWriter(const std::filesystem::path& path);
    ~ZipWriter();

    void add_entry(const std::string& name, const std::string& data);
    void add_file(const std::string& name, const std::filesystem::path& source);
    void finish();  // writes the central directory; implied by destructor

  private:
    struct Entry {
        std::string name;
        std::uint32_t crc, compressed, uncompressed, offset;
        std::uint16_t method;
    };
    std::filesystem::path path_;
    std::vector<Entry> entries_;
    std::vector<std::uint8_t> out_;
    bool finished_ = false;
};

struct ZipEntryInfo {
    std::string name;
    std::uint64_t size;
};

std::vector<ZipEntryInfo> zip_list(const std::filesystem::path& archive);
std::string zip_read(const std::filesystem::path& archive, const std::string& name);
void zip_extract_all(const std::filesystem::path& archive, const std::filesystem::path& dest_dir);

}  // namespace avp
