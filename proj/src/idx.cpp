#include <cstdio>
#include <cstring>
#include <memory>

#include "dwp/checkpoint.hpp"
#include "dwp/data.hpp"

namespace dwp {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint32_t read_be_u32(std::FILE* f, const char* what) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4)
    throw FormatError(std::string("idx: truncated file reading ") + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace

LabeledDataset LabeledDataset::subset(const std::vector<std::int64_t>& indices) const {
  const std::int64_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::int64_t px = c * h * w;
  LabeledDataset out;
  out.classes = classes;
  std::vector<float> data;
  data.reserve(indices.size() * static_cast<std::size_t>(px));
  for (auto i : indices) {
    data.insert(data.end(), images.data() + i * px, images.data() + (i + 1) * px);
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  out.images =
      Tensor<float>::from({static_cast<std::int64_t>(indices.size()), c, h, w}, std::move(data));
  return out;
}

LabeledDataset LabeledDataset::head(std::int64_t n) const {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  return subset(idx);
}

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  FilePtr fi(std::fopen(images_path.c_str(), "rb"));
  if (!fi) throw FormatError("idx: cannot open '" + images_path + "'");
  const auto img_magic = read_be_u32(fi.get(), "images magic");
  if (img_magic != 0x00000803)
    throw FormatError("idx: bad images magic " + std::to_string(img_magic));
  const auto n = read_be_u32(fi.get(), "image count");
  const auto rows = read_be_u32(fi.get(), "rows");
  const auto cols = read_be_u32(fi.get(), "cols");

  FilePtr fl(std::fopen(labels_path.c_str(), "rb"));
  if (!fl) throw FormatError("idx: cannot open '" + labels_path + "'");
  const auto lbl_magic = read_be_u32(fl.get(), "labels magic");
  if (lbl_magic != 0x00000801)
    throw FormatError("idx: bad labels magic " + std::to_string(lbl_magic));
  const auto ln = read_be_u32(fl.get(), "label count");
  if (ln != n)
    throw FormatError("idx: image/label count mismatch (" + std::to_string(n) + " vs " +
                      std::to_string(ln) + ")");

  const std::size_t px = static_cast<std::size_t>(n) * rows * cols;
  std::vector<unsigned char> raw(px);
  if (std::fread(raw.data(), 1, px, fi.get()) != px)
    throw FormatError("idx: truncated image data");
  std::vector<unsigned char> lraw(n);
  if (std::fread(lraw.data(), 1, n, fl.get()) != n)
    throw FormatError("idx: truncated label data");

  LabeledDataset ds;
  std::vector<float> data(px);
  for (std::size_t i = 0; i < px; ++i) data[i] = static_cast<float>(raw[i]) / 255.0f;
  ds.images = Tensor<float>::from({static_cast<std::int64_t>(n), 1, static_cast<std::int64_t>(rows),
                                   static_cast<std::int64_t>(cols)},
                                  std::move(data));
  std::int64_t max_label = 0;
  for (auto b : lraw) {
    ds.labels.push_back(static_cast<std::int64_t>(b));
    max_label = std::max<std::int64_t>(max_label, b);
  }
  ds.classes = max_label + 1;
  return ds;
}

}  // namespace dwp
