#include "mavos/serialization.hpp"

#include <cstring>
#include <fstream>

#include "mavos/errors.hpp"

namespace mavos::storefile {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'V', 'W'};
constexpr uint16_t kVersion = 1;
// A manifest larger than this is a corrupt length field, not a real store.
constexpr uint32_t kMaxManifest = 64u << 20;

std::string at_offset(uint64_t off) {
    return " at byte offset " + std::to_string(off);
}

}  // namespace

void write_file(const std::string& path, const std::string& manifest,
                const std::vector<uint8_t>& payload) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    uint8_t head[10];
    std::memcpy(head, kMagic, 4);
    head[4] = static_cast<uint8_t>(kVersion & 0xff);
    head[5] = static_cast<uint8_t>(kVersion >> 8);
    uint32_t mlen = static_cast<uint32_t>(manifest.size());
    for (int i = 0; i < 4; ++i) head[6 + i] = static_cast<uint8_t>(mlen >> (8 * i));
    out.write(reinterpret_cast<const char*>(head), sizeof(head));
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("write to '" + path + "' failed");
}

RawStore read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    uint8_t head[10];
    in.read(reinterpret_cast<char*>(head), sizeof(head));
    if (in.gcount() != sizeof(head)) {
        throw FormatError("'" + path + "' is truncated inside the header" + at_offset(0));
    }
    if (std::memcmp(head, kMagic, 4) != 0) {
        throw FormatError("'" + path + "' is not a tensor store (bad magic)" + at_offset(0));
    }
    uint16_t version = static_cast<uint16_t>(head[4] | (head[5] << 8));
    if (version != kVersion) {
        throw FormatError("'" + path + "' has unsupported store version " +
                          std::to_string(version) + at_offset(4));
    }
    uint32_t mlen = 0;
    for (int i = 0; i < 4; ++i) mlen |= static_cast<uint32_t>(head[6 + i]) << (8 * i);
    if (mlen == 0 || mlen > kMaxManifest) {
        throw FormatError("'" + path + "' declares an implausible manifest length " +
                          std::to_string(mlen) + at_offset(6));
    }
    std::string manifest(mlen, '\0');
    in.read(manifest.data(), mlen);
    if (in.gcount() != static_cast<std::streamsize>(mlen)) {
        throw FormatError("'" + path + "' is truncated inside the manifest" + at_offset(10));
    }
    RawStore raw;
    try {
        raw.manifest = nlohmann::json::parse(manifest);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "' manifest is not valid JSON (" + e.what() + ")" +
                          at_offset(10));
    }
    raw.payload_offset = 10 + static_cast<uint64_t>(mlen);
    raw.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return raw;
}

}  // namespace mavos::storefile
