#include "autovarp/zipio.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "autovarp/errors.hpp"

namespace avp {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::string deflate_raw(const std::string& data) {
    z_stream zs{};
    if (deflateInit2(&zs, 6, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw IOError("deflate init failed");
    std::string out;
    out.resize(deflateBound(&zs, static_cast<uLong>(data.size())));
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data.data()));
    zs.avail_in = static_cast<uInt>(data.size());
    zs.next_out = reinterpret_cast<Bytef*>(out.data());
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = deflate(&zs, Z_FINISH);
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) throw IOError("deflate failed");
    out.resize(out.size() - zs.avail_out);
    return out;
}

std::string inflate_raw(const std::uint8_t* data, std::size_t len, std::size_t expected) {
    z_stream zs{};
    if (inflateInit2(&zs, -15) != Z_OK) throw IOError("inflate init failed");
    std::string out(expected, '\0');
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<std::uint8_t*>(data));
    zs.avail_in = static_cast<uInt>(len);
    zs.next_out = reinterpret_cast<Bytef*>(out.data());
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END) throw FormatError("corrupt deflate stream in archive");
    return out;
}

std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0] | (p[1] << 8) | (p[2] << 16) |
                                      (static_cast<std::uint32_t>(p[3]) << 24));
}

struct RawEntry {
    std::string name;
    std::uint16_t method;
    std::uint32_t crc, compressed, uncompressed, local_offset;
};

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    return data;
}

std::vector<RawEntry> central_directory(const std::vector<std::uint8_t>& buf,
                                        const std::filesystem::path& path) {
    // locate end-of-central-directory record (no archive comment expected,
    // but scan backwards to be safe)
    if (buf.size() < 22) throw FormatError("'" + path.string() + "' is not a zip archive");
    std::size_t eocd = std::string::npos;
    for (std::size_t i = buf.size() - 22; i + 4 >= 4; --i) {
        if (get_u32(&buf[i]) == 0x06054b50) {
            eocd = i;
            break;
        }
        if (i == 0) break;
    }
    if (eocd == std::string::npos)
        throw FormatError("'" + path.string() + "' has no central directory");
    const std::uint16_t count = get_u16(&buf[eocd + 10]);
    std::size_t pos = get_u32(&buf[eocd + 16]);

    std::vector<RawEntry> entries;
    for (std::uint16_t k = 0; k < count; ++k) {
        if (pos + 46 > buf.size() || get_u32(&buf[pos]) != 0x02014b50)
            throw FormatError("corrupt central directory in '" + path.string() + "'");
        RawEntry e;
        e.method = get_u16(&buf[pos + 10]);
        e.crc = get_u32(&buf[pos + 16]);
        e.compressed = get_u32(&buf[pos + 20]);
        e.uncompressed = get_u32(&buf[pos + 24]);
        const std::uint16_t name_len = get_u16(&buf[pos + 28]);
        const std::uint16_t extra_len = get_u16(&buf[pos + 30]);
        const std::uint16_t comment_len = get_u16(&buf[pos + 32]);
        e.local_offset = get_u32(&buf[pos + 42]);
        e.name.assign(reinterpret_cast<const char*>(&buf[pos + 46]), name_len);
        entries.push_back(std::move(e));
        pos += 46 + name_len + extra_len + comment_len;
    }
    return entries;
}

std::string entry_data(const std::vector<std::uint8_t>& buf, const RawEntry& e,
                       const std::filesystem::path& path) {
    std::size_t pos = e.local_offset;
    if (pos + 30 > buf.size() || get_u32(&buf[pos]) != 0x04034b50)
        throw FormatError("corrupt local header in '" + path.string() + "'");
    const std::uint16_t name_len = get_u16(&buf[pos + 26]);
    const std::uint16_t extra_len = get_u16(&buf[pos + 28]);
    pos += 30 + name_len + extra_len;
    if (pos + e.compressed > buf.size())
        throw FormatError("truncated archive '" + path.string() + "'");
    std::string data;
    if (e.method == 0)
        data.assign(reinterpret_cast<const char*>(&buf[pos]), e.compressed);
    else if (e.method == 8)
        data = inflate_raw(&buf[pos], e.compressed, e.uncompressed);
    else
        throw FormatError("unsupported compression method in '" + path.string() + "'");
    if (crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())) !=
        e.crc)
        throw FormatError("CRC mismatch for '" + e.name + "' in '" + path.string() + "'");
    return data;
}

}  // namespace

ZipWriter::ZipWriter(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

ZipWriter::~ZipWriter() {
    try {
        finish();
    } catch (...) {
        // destructor must not throw; an incomplete archive is left behind
    }
}

void ZipWriter::add_entry(const std::string& name, const std::string& data) {
    Entry e;
    e.name = name;
    e.crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
    e.uncompressed = static_cast<std::uint32_t>(data.size());
    e.offset = static_cast<std::uint32_t>(out_.size());

    std::string compressed = deflate_raw(data);
    e.method = compressed.size() < data.size() ? 8 : 0;
    const std::string& payload = e.method == 8 ? compressed : data;
    e.compressed = static_cast<std::uint32_t>(payload.size());

    put_u32(out_, 0x04034b50);
    put_u16(out_, 20);        // version needed
    put_u16(out_, 0);         // flags
    put_u16(out_, e.method);
    put_u16(out_, 0);         // mod time
    put_u16(out_, 0x5021);    // mod date (fixed for reproducible archives)
    put_u32(out_, e.crc);
    put_u32(out_, e.compressed);
    put_u32(out_, e.uncompressed);
    put_u16(out_, static_cast<std::uint16_t>(name.size()));
    put_u16(out_, 0);  // extra
    out_.insert(out_.end(), name.begin(), name.end());
    out_.insert(out_.end(), payload.begin(), payload.end());

    entries_.push_back(std::move(e));
}

void ZipWriter::add_file(const std::string& name, const std::filesystem::path& source) {
    std::ifstream in(source, std::ios::binary);
    if (!in) throw IOError("cannot open '" + source.string() + "'");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    add_entry(name, data);
}

void ZipWriter::finish() {
    if (finished_) return;
    finished_ = true;

    const std::uint32_t cd_start = static_cast<std::uint32_t>(out_.size());
    for (const Entry& e : entries_) {
        put_u32(out_, 0x02014b50);
        put_u16(out_, 20);  // version made by
        put_u16(out_, 20);  // version needed
        put_u16(out_, 0);
        put_u16(out_, e.method);
        put_u16(out_, 0);
        put_u16(out_, 0x5021);
        put_u32(out_, e.crc);
        put_u32(out_, e.compressed);
        put_u32(out_, e.uncompressed);
        put_u16(out_, static_cast<std::uint16_t>(e.name.size()));
        put_u16(out_, 0);  // extra
        put_u16(out_, 0);  // comment
        put_u16(out_, 0);  // disk
        put_u16(out_, 0);  // internal attrs
        put_u32(out_, 0);  // external attrs
        put_u32(out_, e.offset);
        out_.insert(out_.end(), e.name.begin(), e.name.end());
    }
    const std::uint32_t cd_size = static_cast<std::uint32_t>(out_.size()) - cd_start;
    put_u32(out_, 0x06054b50);
    put_u16(out_, 0);
    put_u16(out_, 0);
    put_u16(out_, static_cast<std::uint16_t>(entries_.size()));
    put_u16(out_, static_cast<std::uint16_t>(entries_.size()));
    put_u32(out_, cd_size);
    put_u32(out_, cd_start);
    put_u16(out_, 0);

    std::ofstream f(path_, std::ios::binary);
    if (!f) throw IOError("cannot write '" + path_.string() + "'");
    f.write(reinterpret_cast<const char*>(out_.data()), static_cast<std::streamsize>(out_.size()));
    if (!f) throw IOError("write failed for '" + path_.string() + "'");
}

std::vector<ZipEntryInfo> zip_list(const std::filesystem::path& archive) {
    const auto buf = read_all(archive);
    std::vector<ZipEntryInfo> out;
    for (const auto& e : central_directory(buf, archive)) out.push_back({e.name, e.uncompressed});
    return out;
}

std::string zip_read(const std::filesystem::path& archive, const std::string& name) {
    const auto buf = read_all(archive);
    for (const auto& e : central_directory(buf, archive))
        if (e.name == name) return entry_data(buf, e, archive);
    throw IOError("entry '" + name + "' not found in '" + archive.string() + "'");
}

void zip_extract_all(const std::filesystem::path& archive, const std::filesystem::path& dest_dir) {
    const auto buf = read_all(archive);
    for (const auto& e : central_directory(buf, archive)) {
        if (e.name.find("..") != std::string::npos)
            throw FormatError("refusing to extract unsafe path '" + e.name + "'");
        const auto target = dest_dir / e.name;
        std::filesystem::create_directories(target.parent_path());
        const std::string data = entry_data(buf, e, archive);
        std::ofstream f(target, std::ios::binary);
        if (!f) throw IOError("cannot write '" + target.string() + "'");
        f.write(data.data(), static_cast<std::streamsize>(data.size()));
    }
}

}  // namespace avp
