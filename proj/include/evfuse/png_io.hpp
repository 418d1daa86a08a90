#ifndef EVFUSE_PNG_IO_HPP
#define EVFUSE_PNG_IO_HPP

#include <string>

#include "evfuse/tensor.hpp"

namespace evfuse {

// Writes a (3,H,W) tensor with values in [0,1] as an 8-bit RGB PNG.
void write_png_rgb8(const std::string& path, const Tensor& img);

// Reads an 8-bit RGB(A) PNG into a (3,H,W) tensor scaled to [0,1].
Tensor read_png_rgb8(const std::string& path);

// Snaps values to the 8-bit grid (round(v*255)/255) so that an image
// written to disk and read back compares bit-equal to the in-memory copy.
Tensor quantize8(const Tensor& img);

} // namespace evfuse

#endif
