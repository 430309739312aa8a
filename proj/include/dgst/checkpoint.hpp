#pragma once

#include <string>

#include "dgst/synth.hpp"
#include "dgst/unet.hpp"

namespace dgst {

// Named tensor archive: magic, length-prefixed JSON manifest (entry name,
// dtype tag, shape, byte offset/length, checksums, metadata record), then
// little-endian raw scalar payloads. Byte-exact round trips; the loader
// validates magic, checksums, dtype tags and the registry digest.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

// Dataset cache in the same container plus a sibling JSON manifest
// (<path>.json with domain, seed, n, checksum).
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

std::string file_sha_hex(const std::string& path);  // fnv1a64 of the bytes

}  // namespace dgst
