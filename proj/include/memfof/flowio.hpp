#pragma once

// Flow field file I/O (.flo), the standard flow color wheel, and the minimal
// image I/O the tool needs: binary PPM/PGM and 8-bit PNG.

#include <string>

#include "memfof/tensor.hpp"

namespace memfof::flowio {

// Middlebury .flo: magic float, int32 width/height, interleaved (u,v) rows.
// Little-endian on disk. Malformed headers or short payloads raise
// FormatError; a 0x0 field is legal.
Tensor read_flo(const std::string& path);
void write_flo(const std::string& path, const Tensor& flow);

// Flow to RGB (3,H,W) in [0,1] with the 55-segment color wheel: hue from
// direction, saturation from magnitude. max_mag <= 0 scales by the largest
// finite magnitude in the field; zero flow is white, non-finite pixels black.
Tensor colorize(const Tensor& flow, float max_mag = 0.0f);

// Reads PPM (P6), PGM (P5, promoted to 3 channels) or 8-bit PNG into a
// (3,H,W) tensor in [0,1]. 16-bit inputs raise FormatError.
Tensor read_image(const std::string& path);

// Writes (3,H,W) or (1,H,W) in [0,1] as PPM/PGM or PNG by file extension.
void write_image(const std::string& path, const Tensor& image);

}  // namespace memfof::flowio
