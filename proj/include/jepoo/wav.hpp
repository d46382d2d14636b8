#pragma once

#include "jepoo/frontend.hpp"

#include <filesystem>

namespace jepoo {

// Reads RIFF/WAVE 16-bit PCM. Multi-channel input is downmixed to mono.
AudioClip read_wav(const std::filesystem::path& path);

// Writes 16-bit PCM mono; samples are clipped to [-1, 1].
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

} // namespace jepoo
