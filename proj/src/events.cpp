#include "evfuse/events.hpp"

#include <cstring>
#include <fstream>

namespace evfuse {

int64_t EventVoxelGrid::total() const {
    int64_t s = 0;
    for (int32_t c : counts) s += c;
    return s;
}

Tensor EventVoxelGrid::to_tensor() const {
    Tensor t(2 * num_bins, height, width);
    for (size_t i = 0; i < counts.size(); ++i) t.v[i] = static_cast<double>(counts[i]);
    return t;
}

int bin_index(int64_t t_k, int64_t t_a, int64_t t_b, int num_bins) {
    if (t_a >= t_b) throw std::invalid_argument("bin_index: window must satisfy t_a < t_b");
    if (num_bins < 1) throw std::invalid_argument("bin_index: need at least one bin");
    if (t_k < t_a || t_k > t_b)
        throw std::out_of_range("bin_index: timestamp " + std::to_string(t_k) + " outside [" +
                                std::to_string(t_a) + "," + std::to_string(t_b) + "]");
    int64_t bin = (t_k - t_a) * num_bins / (t_b - t_a);
    if (bin >= num_bins) bin = num_bins - 1; // right edge lands in the last bin
    return static_cast<int>(bin);
}

EventVoxelGrid voxelize(const std::vector<EventPoint>& events, int64_t t_a, int64_t t_b,
                        const VoxelConfig& config) {
    if (config.width < 1 || config.height < 1 || config.num_bins < 1)
        throw std::invalid_argument("voxelize: bad config");
    EventVoxelGrid g;
    g.num_bins = config.num_bins;
    g.width = config.width;
    g.height = config.height;
    g.t_a = t_a;
    g.t_b = t_b;
    g.counts.assign(static_cast<size_t>(2) * config.num_bins * config.height * config.width, 0);
    for (const EventPoint& e : events) {
        if (e.x >= config.width || e.y >= config.height)
            throw std::out_of_range("voxelize: event at (" + std::to_string(e.x) + "," +
                                    std::to_string(e.y) + ") outside " + std::to_string(config.width) +
                                    "x" + std::to_string(config.height));
        if (e.p != 1 && e.p != -1) throw std::invalid_argument("voxelize: polarity must be +1 or -1");
        const int bin = bin_index(e.t, t_a, t_b, config.num_bins);
        const int p_idx = e.p == 1 ? 0 : 1;
        ++g.at(p_idx, bin, e.y, e.x);
    }
    return g;
}

std::vector<std::vector<EventPoint>> slice_stream(const std::vector<EventPoint>& stream,
                                                  int64_t tick_period, int64_t start, int num_ticks) {
    if (tick_period < 1) throw std::invalid_argument("slice_stream: tick_period must be positive");
    if (num_ticks < 0) throw std::invalid_argument("slice_stream: negative tick count");
    for (size_t i = 1; i < stream.size(); ++i)
        if (stream[i - 1].t > stream[i].t) throw std::invalid_argument("slice_stream: stream not sorted by time");
    std::vector<std::vector<EventPoint>> ticks(num_ticks);
    size_t i = 0;
    while (i < stream.size() && stream[i].t < start) ++i;
    for (int k = 0; k < num_ticks; ++k) {
        const int64_t hi = start + static_cast<int64_t>(k + 1) * tick_period;
        while (i < stream.size() && stream[i].t < hi) ticks[k].push_back(stream[i++]);
    }
    return ticks;
}

namespace {

constexpr char kMagic[4] = {'E', 'V', 'S', '0'};
constexpr size_t kRecordBytes = 13;

template <typename T>
void put_le(std::string& buf, T v) {
    for (size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const char* p) {
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return static_cast<T>(v);
}

} // namespace

void write_evs(const std::string& path, uint16_t width, uint16_t height,
               const std::vector<EventPoint>& events) {
    std::string buf;
    buf.reserve(16 + events.size() * kRecordBytes);
    buf.append(kMagic, 4);
    put_le<uint16_t>(buf, width);
    put_le<uint16_t>(buf, height);
    put_le<uint64_t>(buf, events.size());
    for (const EventPoint& e : events) {
        if (e.p != 1 && e.p != -1) throw std::invalid_argument("write_evs: polarity must be +1 or -1");
        put_le<uint16_t>(buf, e.x);
        put_le<uint16_t>(buf, e.y);
        put_le<int64_t>(buf, e.t);
        buf.push_back(static_cast<char>(e.p));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_evs: cannot open " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("write_evs: write failed for " + path);
}

EvsData read_evs(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_evs: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error("read_evs: " + path + " is not an event container");
    EvsData d;
    d.width = get_le<uint16_t>(buf.data() + 4);
    d.height = get_le<uint16_t>(buf.data() + 6);
    const uint64_t count = get_le<uint64_t>(buf.data() + 8);
    if (buf.size() != 16 + count * kRecordBytes)
        throw std::runtime_error("read_evs: " + path + " truncated or oversized");
    d.events.resize(count);
    const char* p = buf.data() + 16;
    for (uint64_t i = 0; i < count; ++i, p += kRecordBytes) {
        d.events[i].x = get_le<uint16_t>(p);
        d.events[i].y = get_le<uint16_t>(p + 2);
        d.events[i].t = get_le<int64_t>(p + 4);
        d.events[i].p = static_cast<int8_t>(p[12]);
        if (d.events[i].p != 1 && d.events[i].p != -1)
            throw std::runtime_error("read_evs: corrupt polarity in " + path);
    }
    return d;
}

} // namespace evfuse
