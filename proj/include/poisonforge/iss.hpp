#pragma once

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "poisonforge/augment.hpp"
#include "poisonforge/image_batch.hpp"

namespace poisonforge::augment {

enum class IssMode { Grayscale, JPEG };

inline const char* iss_mode_name(IssMode m) {
  return m == IssMode::Grayscale ? "grayscale" : "jpeg";
}
inline IssMode iss_mode_from_name(const std::string& s) {
  if (s == "grayscale") return IssMode::Grayscale;
  if (s == "jpeg") return IssMode::JPEG;
  throw ArgumentError("unknown ISS mode '" + s + "'");
}

namespace detail {

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX] = {0};
};

inline void jpeg_error_trampoline(j_common_ptr cinfo) {
  JpegErr* err = reinterpret_cast<JpegErr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

/// Baseline JPEG round trip of one RGB8 image held in HWC order.
inline std::vector<unsigned char> jpeg_roundtrip_rgb8(
    const std::vector<unsigned char>& rgb, int h, int w, int quality) {
  // encode
  std::vector<unsigned char> compressed;
  {
    jpeg_compress_struct cinfo;
    JpegErr err;
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_trampoline;
    unsigned char* buf = nullptr;
    unsigned long buf_size = 0;
    if (setjmp(err.jump)) {
      jpeg_destroy_compress(&cinfo);
      if (buf) free(buf);
      throw TransformError(std::string("jpeg encode failed: ") + err.message);
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buf, &buf_size);
    cinfo.image_width = static_cast<JDIMENSION>(w);
    cinfo.image_height = static_cast<JDIMENSION>(h);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
      const JSAMPLE* row = rgb.data() + std::size_t(cinfo.next_scanline) * w * 3;
      JSAMPROW rows[1] = {const_cast<JSAMPROW>(row)};
      jpeg_write_scanlines(&cinfo, rows, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    compressed.assign(buf, buf + buf_size);
    free(buf);
  }

  // decode
  std::vector<unsigned char> out(std::size_t(h) * w * 3);
  {
    jpeg_decompress_struct dinfo;
    JpegErr err;
    dinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_trampoline;
    if (setjmp(err.jump)) {
      jpeg_destroy_decompress(&dinfo);
      throw TransformError(std::string("jpeg decode failed: ") + err.message);
    }
    jpeg_create_decompress(&dinfo);
    jpeg_mem_src(&dinfo, compressed.data(),
                 static_cast<unsigned long>(compressed.size()));
    jpeg_read_header(&dinfo, TRUE);
    dinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&dinfo);
    if (static_cast<int>(dinfo.output_width) != w ||
        static_cast<int>(dinfo.output_height) != h) {
      jpeg_destroy_decompress(&dinfo);
      throw TransformError("jpeg decode produced unexpected dimensions");
    }
    while (dinfo.output_scanline < dinfo.output_height) {
      JSAMPROW rows[1] = {
          out.data() + std::size_t(dinfo.output_scanline) * w * 3};
      jpeg_read_scanlines(&dinfo, rows, 1);
    }
    jpeg_finish_decompress(&dinfo);
    jpeg_destroy_decompress(&dinfo);
  }
  return out;
}

}  // namespace detail

/// The ISS countermeasure as a dataset pre-transform: Grayscale replicates
/// ITU-R 601 luminance across channels; JPEG pushes every image through a
/// baseline codec at the given quality.
inline ImageBatch iss_transform(const ImageBatch& batch, IssMode mode,
                                int jpeg_quality = 10) {
  ImageBatch out = batch;
  if (mode == IssMode::Grayscale) {
    for (int i = 0; i < batch.n(); ++i)
      for (int y = 0; y < batch.h(); ++y)
        for (int x = 0; x < batch.w(); ++x) {
          float g = static_cast<float>(
              detail::kLumaR * batch.pixels.at4(i, 0, y, x) +
              detail::kLumaG * batch.pixels.at4(i, 1, y, x) +
              detail::kLumaB * batch.pixels.at4(i, 2, y, x));
          g = std::clamp(g, 0.0f, 1.0f);
          out.pixels.at4(i, 0, y, x) = g;
          out.pixels.at4(i, 1, y, x) = g;
          out.pixels.at4(i, 2, y, x) = g;
        }
    return out;
  }

  if (jpeg_quality < 1 || jpeg_quality > 100)
    throw ArgumentError("iss_transform: jpeg_quality must be in [1,100]");
  if (batch.c() != 3)
    throw ArgumentError("iss_transform: JPEG mode expects 3 channels");
  const int H = batch.h(), W = batch.w();
  std::vector<unsigned char> rgb(std::size_t(H) * W * 3);
  for (int i = 0; i < batch.n(); ++i) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c)
          rgb[(std::size_t(y) * W + x) * 3 + c] = static_cast<unsigned char>(
              std::lround(std::clamp(batch.pixels.at4(i, c, y, x), 0.0f,
                                     1.0f) *
                          255.0f));
    std::vector<unsigned char> back =
        detail::jpeg_roundtrip_rgb8(rgb, H, W, jpeg_quality);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c)
          out.pixels.at4(i, c, y, x) =
              float(back[(std::size_t(y) * W + x) * 3 + c]) / 255.0f;
  }
  return out;
}

}  // namespace poisonforge::augment
