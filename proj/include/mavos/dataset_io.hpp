#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "mavos/masks.hpp"
#include "mavos/synthgen.hpp"

namespace mavos {

// On-disk video container (.mavs):
//
//   magic "MAVS" | u16 version (LE) | u32 header length (LE) | header JSON
//   then per frame:
//     3 * grid * grid pixel bytes (planar R, G, B)
//     per object: u32 run count, then that many u32 run lengths (LE),
//     run-length encoding of the flattened mask starting with a zero run
//     and alternating. Runs must sum to grid * grid.
//
// Malformed input raises FormatError naming the byte offset of the first
// inconsistency; plain I/O trouble raises IoError.

struct DatasetHeader {
    std::string name;
    int grid = 0;
    long frames = 0;
    int objects = 0;
    uint64_t seed = 0;
    std::string kind = "standard";
    std::string pixel_format = "rgb8";
};

std::vector<uint32_t> rle_encode(const BinMask& m);
BinMask rle_decode(const std::vector<uint32_t>& runs, int grid);

class DatasetWriter {
  public:
    DatasetWriter(const std::string& path, const DatasetHeader& header);
    ~DatasetWriter();

    void write_frame(const FramePixels& px, const MaskSet& masks);

    // Flush and verify the promised frame count was delivered.
    void close();

  private:
    std::ofstream out_;
    DatasetHeader header_;
    std::string path_;
    long written_ = 0;
    bool closed_ = false;
};

class DatasetReader {
  public:
    explicit DatasetReader(const std::string& path);

    const DatasetHeader& header() const { return header_; }
    long frames_read() const { return read_; }
    bool done() const { return read_ >= header_.frames; }

    // Sequential access; UsageError past the last frame.
    void read_frame(FramePixels& px, MaskSet& masks);

  private:
    std::ifstream in_;
    DatasetHeader header_;
    std::string path_;
    long read_ = 0;
    uint64_t offset_ = 0;
};

// Render a whole synthetic video to a container file.
void export_video(const std::string& path, const VideoSpec& spec);

// Binary P5 grayscale image; `gray` is row-major, size width * height.
void write_pgm(const std::string& path, const std::vector<uint8_t>& gray, int width, int height,
               int maxval = 255);

}  // namespace mavos
