#ifndef EVFUSE_EVENTS_HPP
#define EVFUSE_EVENTS_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "evfuse/tensor.hpp"

namespace evfuse {

// A single asynchronous brightness-change event.
struct EventPoint {
    uint16_t x = 0;
    uint16_t y = 0;
    int64_t t = 0; // microseconds
    int8_t p = 1;  // +1 brightness increase, -1 decrease
};

struct VoxelConfig {
    int num_bins = 10;
    int width = 0;
    int height = 0;
};

// Dense count grid over [polarity][bin][row][col]; the window is [t_a, t_b]
// with the right edge clamped into the last bin.
struct EventVoxelGrid {
    int num_bins = 0, width = 0, height = 0;
    int64_t t_a = 0, t_b = 0;
    std::vector<int32_t> counts;

    int32_t& at(int p_idx, int bin, int y, int x) {
        return counts[((static_cast<size_t>(p_idx) * num_bins + bin) * height + y) * width + x];
    }
    int32_t at(int p_idx, int bin, int y, int x) const {
        return counts[((static_cast<size_t>(p_idx) * num_bins + bin) * height + y) * width + x];
    }
    int64_t total() const;

    // Flatten to 2*T channels, polarity-major: channel = p_idx*T + bin.
    Tensor to_tensor() const;
};

int bin_index(int64_t t_k, int64_t t_a, int64_t t_b, int num_bins);

EventVoxelGrid voxelize(const std::vector<EventPoint>& events, int64_t t_a, int64_t t_b,
                        const VoxelConfig& config);

// Splits a time-sorted stream into num_ticks half-open intervals
// [start + k*period, start + (k+1)*period).
std::vector<std::vector<EventPoint>> slice_stream(const std::vector<EventPoint>& stream,
                                                  int64_t tick_period, int64_t start, int num_ticks);

// Binary event container: 16-byte header (magic "EVS0", width u16, height
// u16, count u64) followed by packed little-endian 13-byte records
// (x u16, y u16, t i64, p i8).
struct EvsData {
    uint16_t width = 0;
    uint16_t height = 0;
    std::vector<EventPoint> events;
};

void write_evs(const std::string& path, uint16_t width, uint16_t height,
               const std::vector<EventPoint>& events);
EvsData read_evs(const std::string& path);

} // namespace evfuse

#endif
