#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "seqa/datagen.hpp"

// Minimal RIFF/WAVE codec: mono PCM16 or IEEE-float32, little-endian host
// assumed (checked at runtime for the float path).

namespace seqa::datagen {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xff));
  b.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  b.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  b.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xff));
  b.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

void put_tag(std::vector<unsigned char>& b, const char* tag) {
  b.insert(b.end(), tag, tag + 4);
}

std::uint32_t get_u32(const std::vector<unsigned char>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) |
         (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

std::uint16_t get_u16(const std::vector<unsigned char>& b, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<std::uint16_t>(b[at]) |
                                    (static_cast<std::uint16_t>(b[at + 1]) << 8));
}

bool tag_is(const std::vector<unsigned char>& b, std::size_t at, const char* tag) {
  return std::memcmp(b.data() + at, tag, 4) == 0;
}

}  // namespace

signal::Waveform wav_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw WavError("wav: cannot open " + path);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());

  if (b.size() < 44 || !tag_is(b, 0, "RIFF") || !tag_is(b, 8, "WAVE"))
    throw WavError("wav: malformed RIFF header in " + path);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t data_at = 0, data_len = 0;

  std::size_t at = 12;
  while (at + 8 <= b.size()) {
    const std::size_t chunk_len = get_u32(b, at + 4);
    const std::size_t body = at + 8;
    if (body + chunk_len > b.size())
      throw WavError("wav: truncated chunk in " + path);
    if (tag_is(b, at, "fmt ")) {
      if (chunk_len < 16) throw WavError("wav: short fmt chunk in " + path);
      format = get_u16(b, body);
      channels = get_u16(b, body + 2);
      rate = get_u32(b, body + 4);
      bits = get_u16(b, body + 14);
      have_fmt = true;
    } else if (tag_is(b, at, "data")) {
      data_at = body;
      data_len = chunk_len;
    }
    at = body + chunk_len + (chunk_len % 2);  // chunks are word-aligned
  }

  if (!have_fmt || data_at == 0) throw WavError("wav: missing fmt/data chunk in " + path);
  if (channels != 1) throw WavError("wav: only mono supported, got " +
                                    std::to_string(channels) + " channels in " + path);

  std::vector<double> samples;
  if (format == kFormatPcm && bits == 16) {
    samples.reserve(data_len / 2);
    for (std::size_t i = 0; i + 1 < data_len; i += 2) {
      const std::int16_t v =
          static_cast<std::int16_t>(get_u16(b, data_at + i));
      samples.push_back(static_cast<double>(v) / 32768.0);
    }
  } else if (format == kFormatFloat && bits == 32) {
    static_assert(sizeof(float) == 4);
    samples.reserve(data_len / 4);
    for (std::size_t i = 0; i + 3 < data_len; i += 4) {
      const std::uint32_t u = get_u32(b, data_at + i);
      float v;
      std::memcpy(&v, &u, 4);
      samples.push_back(static_cast<double>(v));
    }
  } else {
    throw WavError("wav: unsupported codec (format " + std::to_string(format) + ", " +
                   std::to_string(bits) + " bit) in " + path);
  }

  return signal::Waveform{std::move(samples), static_cast<int>(rate)};
}

void wav_write(const std::string& path, const signal::Waveform& w, int bit_depth) {
  if (bit_depth != 16 && bit_depth != 32)
    throw WavError("wav: bit depth must be 16 (PCM) or 32 (float)");
  const std::uint16_t format = bit_depth == 16 ? kFormatPcm : kFormatFloat;
  const std::uint16_t bytes_per = static_cast<std::uint16_t>(bit_depth / 8);
  const std::uint32_t data_len = static_cast<std::uint32_t>(w.samples.size() * bytes_per);

  std::vector<unsigned char> b;
  b.reserve(60 + data_len);
  put_tag(b, "RIFF");
  put_u32(b, 0);  // patched below
  put_tag(b, "WAVE");
  put_tag(b, "fmt ");
  put_u32(b, 16);
  put_u16(b, format);
  put_u16(b, 1);  // mono
  put_u32(b, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(b, static_cast<std::uint32_t>(w.sample_rate) * bytes_per);
  put_u16(b, bytes_per);
  put_u16(b, static_cast<std::uint16_t>(bit_depth));
  if (format == kFormatFloat) {  // fact chunk is customary for non-PCM
    put_tag(b, "fact");
    put_u32(b, 4);
    put_u32(b, static_cast<std::uint32_t>(w.samples.size()));
  }
  put_tag(b, "data");
  put_u32(b, data_len);

  if (bit_depth == 16) {
    for (double s : w.samples) {
      const double clamped = std::min(std::max(s, -1.0), 1.0 - 1.0 / 32768.0);
      const double scaled = std::nearbyint(clamped * 32768.0);
      put_u16(b, static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
    }
  } else {
    for (double s : w.samples) {
      const float v = static_cast<float>(s);
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      put_u32(b, u);
    }
  }

  const std::uint32_t riff_len = static_cast<std::uint32_t>(b.size() - 8);
  b[4] = static_cast<unsigned char>(riff_len & 0xff);
  b[5] = static_cast<unsigned char>((riff_len >> 8) & 0xff);
  b[6] = static_cast<unsigned char>((riff_len >> 16) & 0xff);
  b[7] = static_cast<unsigned char>((riff_len >> 24) & 0xff);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f.good()) throw WavError("wav: cannot write " + path);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!f.good()) throw WavError("wav: write failed for " + path);
}

}  // namespace seqa::datagen
