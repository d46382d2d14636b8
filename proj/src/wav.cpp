#include "jepoo/wav.hpp"

#include "jepoo/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace jepoo {

namespace {

std::uint32_t le32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t le16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

} // namespace

AudioClip read_wav(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IngestionError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    const auto fail = [&](const char* why) {
        return IngestionError(path.string() + ": " + why);
    };
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw fail("not a RIFF/WAVE file");

    std::uint16_t channels = 0, bits = 0, format = 0;
    std::uint32_t rate = 0;
    const std::uint8_t* data = nullptr;
    std::size_t data_len = 0;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const std::uint8_t* chunk = bytes.data() + pos;
        const std::uint32_t len = le32(chunk + 4);
        const std::size_t body = pos + 8;
        if (body + len > bytes.size()) throw fail("chunk overruns file");
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (len < 16) throw fail("short fmt chunk");
            format = le16(bytes.data() + body);
            channels = le16(bytes.data() + body + 2);
            rate = le32(bytes.data() + body + 4);
            bits = le16(bytes.data() + body + 14);
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = bytes.data() + body;
            data_len = len;
        }
        pos = body + len + (len & 1u);
    }
    if (format != 1 || bits != 16) throw fail("only 16-bit PCM is supported");
    if (channels == 0 || rate == 0) throw fail("missing fmt chunk");
    if (data == nullptr) throw fail("missing data chunk");

    const std::size_t frames = data_len / (2u * channels);
    AudioClip clip;
    clip.sample_rate = rate;
    clip.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::uint16_t c = 0; c < channels; ++c) {
            const auto raw = static_cast<std::int16_t>(le16(data + 2 * (i * channels + c)));
            acc += raw / 32768.0;
        }
        clip.samples[i] = acc / channels;
    }
    return clip;
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
    const auto n = static_cast<std::uint32_t>(clip.samples.size());
    const auto rate = static_cast<std::uint32_t>(std::lround(clip.sample_rate));
    std::vector<std::uint8_t> out;
    out.reserve(44 + 2 * static_cast<std::size_t>(n));
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    put32(out, 36 + 2 * n);
    out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    put32(out, 16);
    put16(out, 1);
    put16(out, 1);
    put32(out, rate);
    put32(out, rate * 2);
    put16(out, 2);
    put16(out, 16);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    put32(out, 2 * n);
    for (double s : clip.samples) {
        // Same 1/32768 scale as the reader; +1.0 saturates at 32767.
        const long q = std::clamp(std::lround(s * 32768.0), -32768L, 32767L);
        put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

} // namespace jepoo
