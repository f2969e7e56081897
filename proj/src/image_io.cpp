#include "tbx/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include <json.hpp>

namespace tbx::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

std::uint32_t float_bits_le(float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) {
    bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) |
           ((bits >> 8) & 0xff00u) | (bits >> 24);
  }
  return bits;
}

float float_from_le(std::uint32_t bits) {
  if constexpr (std::endian::native == std::endian::big) {
    bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) |
           ((bits >> 8) & 0xff00u) | (bits >> 24);
  }
  return std::bit_cast<float>(bits);
}

void write_floats(std::ostream& out, std::span<const float> values) {
  std::vector<std::uint32_t> raw(values.size());
  std::transform(values.begin(), values.end(), raw.begin(), float_bits_le);
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
}

std::vector<float> read_floats(std::istream& in, std::size_t count,
                               const fs::path& path) {
  std::vector<std::uint32_t> raw(count);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(count * sizeof(std::uint32_t)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(std::uint32_t)) {
    throw IoError("truncated float data in " + path.string());
  }
  std::vector<float> out(count);
  std::transform(raw.begin(), raw.end(), out.begin(), float_from_le);
  return out;
}

}  // namespace

ImagePlane2D read_png(const fs::path& path) {
  auto file = open_file(path, "rb");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err,
                                           png_error_fn, png_warning_fn);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> data;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("PNG decode failed for " + path.string() + ": " + err);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);

  if (color == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(png);
    bit_depth = 8;
  }
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    bit_depth = 8;
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (bit_depth == 16 && std::endian::native == std::endian::little) {
    png_set_swap(png);
  }
  png_read_update_info(png, info);

  const std::size_t rowbytes = png_get_rowbytes(png, info);
  data.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 r = 0; r < height; ++r) rows[r] = data.data() + r * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::vector<float> pixels(static_cast<std::size_t>(width) * height);
  if (bit_depth == 16) {
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      std::uint16_t v;
      std::memcpy(&v, data.data() + 2 * i, 2);
      pixels[i] = static_cast<float>(v) / 65535.0f;
    }
  } else {
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      pixels[i] = static_cast<float>(data[i]) / 255.0f;
    }
  }
  return ImagePlane2D(static_cast<int>(width), static_cast<int>(height),
                      std::move(pixels), bit_depth);
}

void write_png16(const fs::path& path, const ImagePlane2D& image) {
  auto file = open_file(path, "wb");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err,
                                            png_error_fn, png_warning_fn);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);

  const auto w = static_cast<std::size_t>(image.width());
  const auto h = static_cast<std::size_t>(image.height());
  std::vector<std::uint8_t> data(w * h * 2);
  for (std::size_t i = 0; i < w * h; ++i) {
    const float v = std::clamp(image.pixels()[i], 0.0f, 1.0f);
    const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0f));
    data[2 * i] = static_cast<std::uint8_t>(q >> 8);  // PNG is big-endian
    data[2 * i + 1] = static_cast<std::uint8_t>(q & 0xff);
  }
  std::vector<png_bytep> rows(h);
  for (std::size_t r = 0; r < h; ++r) rows[r] = data.data() + r * w * 2;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encode failed for " + path.string() + ": " + err);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w),
               static_cast<png_uint_32>(h), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_volume(const fs::path& path, const Volume3D& volume) {
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write volume " + path.string());
    write_floats(out, volume.voxels());
    if (!out) throw IoError("failed writing volume " + path.string());
  }
  nlohmann::ordered_json sidecar;
  const auto& d = volume.dims();
  sidecar["dims"] = {d.depth, d.height, d.width};
  sidecar["provenance"] = to_string(volume.provenance());
  std::ofstream meta(path.string() + ".json", std::ios::binary | std::ios::trunc);
  if (!meta) throw IoError("cannot write sidecar for " + path.string());
  meta << sidecar.dump();
}

Volume3D read_volume(const fs::path& path) {
  std::ifstream meta(path.string() + ".json", std::ios::binary);
  if (!meta) throw IoError("missing sidecar " + path.string() + ".json");
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad sidecar for " + path.string() + ": " + e.what());
  }
  const auto dims_json = sidecar.at("dims");
  if (!dims_json.is_array() || dims_json.size() != 3) {
    throw IoError("sidecar dims must be [D,H,W] in " + path.string());
  }
  const Dims3 dims{dims_json[0].get<int>(), dims_json[1].get<int>(),
                   dims_json[2].get<int>()};
  const auto provenance =
      parse_provenance(sidecar.at("provenance").get<std::string>());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open volume " + path.string());
  auto voxels = read_floats(in, dims.count(), path);
  return Volume3D(dims, std::move(voxels), provenance);
}

void write_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  if (checkpoint.header_json.find('\n') != std::string::npos) {
    throw InvalidArgument("checkpoint header must be a single line");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << checkpoint.header_json << '\n';
  write_floats(out, checkpoint.values);
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Checkpoint ck;
  std::getline(in, ck.header_json);
  const auto start = in.tellg();
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  in.seekg(start);
  const auto bytes = static_cast<std::size_t>(end - start);
  if (bytes % sizeof(float) != 0) {
    throw IoError("checkpoint payload is not a whole number of floats: " +
                  path.string());
  }
  ck.values = read_floats(in, bytes / sizeof(float), path);
  return ck;
}

}  // namespace tbx::io
