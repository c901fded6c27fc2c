#include "mavos/dataset_io.hpp"

#include <json.hpp>

namespace mavos {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'M', 'A', 'V', 'S'};
constexpr uint16_t kVersion = 1;
constexpr uint32_t kMaxHeaderLen = 1 << 20;

void put_u16(std::ofstream& out, uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    out.write(b, 2);
}

void put_u32(std::ofstream& out, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

std::string at_offset(uint64_t off) { return " at byte offset " + std::to_string(off); }

}  // namespace

std::vector<uint32_t> rle_encode(const BinMask& m) {
    std::vector<uint32_t> runs;
    uint8_t current = 0;  // encoding starts with a zero run, possibly empty
    uint32_t len = 0;
    for (uint8_t v : m.px) {
        uint8_t bit = v ? 1 : 0;
        if (bit == current) {
            ++len;
        } else {
            runs.push_back(len);
            current = bit;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

BinMask rle_decode(const std::vector<uint32_t>& runs, int grid) {
    BinMask m(grid, grid);
    size_t pos = 0;
    size_t total = m.px.size();
    uint8_t bit = 0;
    for (uint32_t r : runs) {
        if (pos + r > total) {
            throw FormatError("mask run-length data overruns the " + std::to_string(grid) + "x" +
                              std::to_string(grid) + " grid");
        }
        if (bit) std::fill(m.px.begin() + pos, m.px.begin() + pos + r, uint8_t(1));
        pos += r;
        bit ^= 1;
    }
    if (pos != total) {
        throw FormatError("mask run-length data covers " + std::to_string(pos) + " of " +
                          std::to_string(total) + " pixels");
    }
    return m;
}

DatasetWriter::DatasetWriter(const std::string& path, const DatasetHeader& header)
    : header_(header), path_(path) {
    if (header.grid < 1 || header.frames < 1 || header.objects < 0) {
        throw ConfigError("dataset header for '" + path + "' has non-positive dimensions");
    }
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + path + "' for writing");
    json j;
    j["name"] = header.name;
    j["grid"] = header.grid;
    j["frames"] = header.frames;
    j["objects"] = header.objects;
    j["seed"] = header.seed;
    j["kind"] = header.kind;
    j["pixel_format"] = header.pixel_format;
    std::string hdr = j.dump();
    out_.write(kMagic, 4);
    put_u16(out_, kVersion);
    put_u32(out_, static_cast<uint32_t>(hdr.size()));
    out_.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    if (!out_) throw IoError("write failure on '" + path + "'");
}

DatasetWriter::~DatasetWriter() = default;

void DatasetWriter::write_frame(const FramePixels& px, const MaskSet& masks) {
    if (closed_) throw UsageError("dataset writer already closed");
    if (written_ >= header_.frames) {
        throw UsageError("dataset writer got more frames than the header promised");
    }
    size_t plane = static_cast<size_t>(header_.grid) * header_.grid;
    if (px.grid != header_.grid || px.rgb.size() != 3 * plane) {
        throw DimensionError("frame pixels do not match the dataset grid of " +
                             std::to_string(header_.grid));
    }
    if (masks.grid != header_.grid || masks.count() != header_.objects) {
        throw DimensionError("frame masks do not match the dataset header (" +
                             std::to_string(masks.count()) + " objects vs " +
                             std::to_string(header_.objects) + ")");
    }
    out_.write(reinterpret_cast<const char*>(px.rgb.data()),
               static_cast<std::streamsize>(px.rgb.size()));
    for (const auto& m : masks.objects) {
        std::vector<uint32_t> runs = rle_encode(m);
        put_u32(out_, static_cast<uint32_t>(runs.size()));
        for (uint32_t r : runs) put_u32(out_, r);
    }
    if (!out_) throw IoError("write failure on '" + path_ + "'");
    ++written_;
}

void DatasetWriter::close() {
    if (closed_) return;
    if (written_ != header_.frames) {
        throw UsageError("dataset writer closed after " + std::to_string(written_) + " of " +
                         std::to_string(header_.frames) + " frames");
    }
    out_.flush();
    if (!out_) throw IoError("write failure on '" + path_ + "'");
    out_.close();
    closed_ = true;
}

DatasetReader::DatasetReader(const std::string& path) : path_(path) {
    in_.open(path, std::ios::binary);
    if (!in_) throw IoError("cannot open '" + path + "' for reading");

    char magic[4];
    in_.read(magic, 4);
    if (in_.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("'" + path + "' is not a video container (bad magic" + at_offset(0) +
                          ")");
    }
    unsigned char vb[2];
    in_.read(reinterpret_cast<char*>(vb), 2);
    if (in_.gcount() != 2) throw FormatError("'" + path + "' truncated" + at_offset(4));
    uint16_t version = static_cast<uint16_t>(vb[0] | (vb[1] << 8));
    if (version != kVersion) {
        throw FormatError("'" + path + "' has unsupported container version " +
                          std::to_string(version) + at_offset(4));
    }
    unsigned char lb[4];
    in_.read(reinterpret_cast<char*>(lb), 4);
    if (in_.gcount() != 4) throw FormatError("'" + path + "' truncated" + at_offset(6));
    uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<uint32_t>(lb[i]) << (8 * i);
    if (hlen == 0 || hlen > kMaxHeaderLen) {
        throw FormatError("'" + path + "' header length " + std::to_string(hlen) +
                          " is implausible" + at_offset(6));
    }
    std::string hdr(hlen, '\0');
    in_.read(hdr.data(), hlen);
    if (in_.gcount() != static_cast<std::streamsize>(hlen)) {
        throw FormatError("'" + path + "' truncated inside the header" + at_offset(10));
    }
    json j;
    try {
        j = json::parse(hdr);
    } catch (const json::exception& e) {
        throw FormatError("'" + path + "' header is not valid JSON (" + e.what() + ")" +
                          at_offset(10));
    }
    try {
        header_.name = j.value("name", std::string());
        header_.grid = j.at("grid").get<int>();
        header_.frames = j.at("frames").get<long>();
        header_.objects = j.at("objects").get<int>();
        header_.seed = j.value("seed", uint64_t(0));
        header_.kind = j.value("kind", std::string("standard"));
        header_.pixel_format = j.value("pixel_format", std::string());
    } catch (const json::exception& e) {
        throw FormatError("'" + path + "' header is missing fields (" + std::string(e.what()) +
                          ")" + at_offset(10));
    }
    if (header_.pixel_format != "rgb8") {
        throw FormatError("'" + path + "' stores pixel format '" + header_.pixel_format +
                          "' but this build reads only rgb8");
    }
    if (header_.grid < 1 || header_.frames < 1 || header_.objects < 0) {
        throw FormatError("'" + path + "' header has non-positive dimensions" + at_offset(10));
    }
    offset_ = 10 + hlen;
}

void DatasetReader::read_frame(FramePixels& px, MaskSet& masks) {
    if (done()) {
        throw UsageError("'" + path_ + "': all " + std::to_string(header_.frames) +
                         " frames already read");
    }
    size_t plane = static_cast<size_t>(header_.grid) * header_.grid;
    px.grid = header_.grid;
    px.rgb.assign(3 * plane, 0);
    in_.read(reinterpret_cast<char*>(px.rgb.data()), static_cast<std::streamsize>(3 * plane));
    if (in_.gcount() != static_cast<std::streamsize>(3 * plane)) {
        throw FormatError("'" + path_ + "' truncated in frame " + std::to_string(read_) +
                          " pixels" + at_offset(offset_));
    }
    offset_ += 3 * plane;

    masks = MaskSet(header_.grid, header_.objects);
    for (int o = 0; o < header_.objects; ++o) {
        unsigned char cb[4];
        in_.read(reinterpret_cast<char*>(cb), 4);
        if (in_.gcount() != 4) {
            throw FormatError("'" + path_ + "' truncated before mask " + std::to_string(o) +
                              " of frame " + std::to_string(read_) + at_offset(offset_));
        }
        uint32_t count = 0;
        for (int i = 0; i < 4; ++i) count |= static_cast<uint32_t>(cb[i]) << (8 * i);
        if (count == 0 || count > plane + 1) {
            throw FormatError("'" + path_ + "' mask " + std::to_string(o) + " of frame " +
                              std::to_string(read_) + " has implausible run count " +
                              std::to_string(count) + at_offset(offset_));
        }
        offset_ += 4;
        std::vector<uint32_t> runs(count);
        for (uint32_t i = 0; i < count; ++i) {
            unsigned char rb[4];
            in_.read(reinterpret_cast<char*>(rb), 4);
            if (in_.gcount() != 4) {
                throw FormatError("'" + path_ + "' truncated inside mask " + std::to_string(o) +
                                  " of frame " + std::to_string(read_) + at_offset(offset_));
            }
            uint32_t r = 0;
            for (int k = 0; k < 4; ++k) r |= static_cast<uint32_t>(rb[k]) << (8 * k);
            runs[i] = r;
            offset_ += 4;
        }
        try {
            masks.objects[o] = rle_decode(runs, header_.grid);
        } catch (const FormatError& e) {
            throw FormatError("'" + path_ + "' frame " + std::to_string(read_) + " mask " +
                              std::to_string(o) + ": " + e.what() + at_offset(offset_));
        }
    }
    try {
        masks.validate(header_.objects);
    } catch (const ValidationError& e) {
        throw FormatError("'" + path_ + "' frame " + std::to_string(read_) +
                          " holds inconsistent masks: " + e.what() + at_offset(offset_));
    }
    ++read_;
}

void write_pgm(const std::string& path, const std::vector<uint8_t>& gray, int width, int height,
               int maxval) {
    if (width <= 0 || height <= 0 || maxval < 1 || maxval > 255 ||
        gray.size() != static_cast<size_t>(width) * static_cast<size_t>(height)) {
        throw UsageError("write_pgm: bad image dimensions for '" + path + "'");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "P5\n" << width << " " << height << "\n" << maxval << "\n";
    out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

void export_video(const std::string& path, const VideoSpec& spec) {
    DatasetHeader h;
    h.name = spec.name;
    h.grid = spec.cfg.grid;
    h.frames = spec.cfg.frames;
    h.objects = spec.cfg.n_objects;
    h.seed = spec.cfg.seed;
    h.kind = scene_kind_name(spec.cfg.kind);
    DatasetWriter w(path, h);
    for (long t = 0; t < spec.cfg.frames; ++t) {
        w.write_frame(render_pixels(spec.cfg, t), render_masks(spec.cfg, t));
    }
    w.close();
}

}  // namespace mavos
