#include "udaseg/volume_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "udaseg/fsutil.hpp"

static_assert(std::endian::native == std::endian::little, "volume I/O assumes a little-endian host");

namespace udaseg::io {
namespace {

constexpr char kMagic[4] = {'U', 'D', 'A', 'V'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeFloat32 = 1;
constexpr std::uint32_t kDtypeUint8 = 2;
constexpr std::size_t kNativeHeader = 4 + 4 + 4 + 3 * 8 + 3 * 8 + 3 * 8 + 9 * 8;

constexpr std::size_t kNiftiHeader = 348;
constexpr std::size_t kNiftiDataOffset = 352;
constexpr std::int16_t kNiftiInt16 = 4;
constexpr std::int16_t kNiftiFloat32 = 16;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
void put_at(std::string& out, std::size_t offset, T v) {
  std::memcpy(out.data() + offset, &v, sizeof(T));
}

template <typename T>
T get_at(const std::string& in, std::size_t offset) {
  T v;
  std::memcpy(&v, in.data() + offset, sizeof(T));
  return v;
}

template <typename T>
std::string encode_native(const Grid<T>& g, std::uint32_t dtype) {
  const Geometry& geo = g.geometry();
  std::string out;
  out.reserve(kNativeHeader + g.data().size() * sizeof(T));
  out.append(kMagic, 4);
  put(out, kVersion);
  put(out, dtype);
  for (const auto d : geo.dims) put(out, static_cast<std::uint64_t>(d));
  for (const auto s : geo.spacing) put(out, s);
  for (const auto o : geo.origin) put(out, o);
  for (const auto m : geo.direction) put(out, m);
  out.append(reinterpret_cast<const char*>(g.data().data()), g.data().size() * sizeof(T));
  return out;
}

struct NativeHeader {
  std::uint32_t dtype;
  Geometry geometry;
};

NativeHeader decode_native_header(const std::string& in) {
  require(in.size() >= kNativeHeader, ErrorKind::Integrity,
          "native volume: truncated header (" + std::to_string(in.size()) + " bytes)");
  if (std::memcmp(in.data(), kMagic, 4) != 0) throw ParseError("native volume: bad magic", 0);
  if (get_at<std::uint32_t>(in, 4) != kVersion) throw ParseError("native volume: unsupported version", 4);
  NativeHeader h;
  h.dtype = get_at<std::uint32_t>(in, 8);
  if (h.dtype != kDtypeFloat32 && h.dtype != kDtypeUint8)
    throw ParseError("native volume: unknown dtype " + std::to_string(h.dtype), 8);
  std::size_t off = 12;
  for (int a = 0; a < 3; ++a, off += 8) {
    const auto d = get_at<std::uint64_t>(in, off);
    if (d == 0 || d > (std::uint64_t{1} << 31)) throw ParseError("native volume: invalid dimension", off);
    h.geometry.dims[a] = static_cast<std::int64_t>(d);
  }
  for (int a = 0; a < 3; ++a, off += 8) {
    h.geometry.spacing[a] = get_at<double>(in, off);
    if (!(h.geometry.spacing[a] > 0.0) || !std::isfinite(h.geometry.spacing[a]))
      throw ParseError("native volume: invalid spacing", off);
  }
  for (int a = 0; a < 3; ++a, off += 8) h.geometry.origin[a] = get_at<double>(in, off);
  const std::size_t dir_off = off;
  for (int a = 0; a < 9; ++a, off += 8) h.geometry.direction[a] = get_at<double>(in, off);
  try {
    h.geometry.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("native volume: ") + e.what(), dir_off);
  }
  return h;
}

template <typename T>
std::vector<T> native_payload(const std::string& in, const Geometry& geo) {
  const auto n = static_cast<std::uint64_t>(geo.voxel_count());
  const std::uint64_t expected = n * sizeof(T);
  require(in.size() - kNativeHeader == expected, ErrorKind::Integrity,
          "native volume: payload is " + std::to_string(in.size() - kNativeHeader) +
              " bytes, header declares " + std::to_string(expected));
  std::vector<T> data(static_cast<std::size_t>(n));
  std::memcpy(data.data(), in.data() + kNativeHeader, expected);
  return data;
}

std::string nifti_header(const Geometry& geo, std::int16_t datatype, std::int16_t bitpix) {
  std::string h(kNiftiDataOffset, '\0');
  put_at<std::int32_t>(h, 0, static_cast<std::int32_t>(kNiftiHeader));
  const std::int16_t dim[8] = {3,
                               static_cast<std::int16_t>(geo.dims[0]),
                               static_cast<std::int16_t>(geo.dims[1]),
                               static_cast<std::int16_t>(geo.dims[2]),
                               1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put_at<std::int16_t>(h, 40 + 2 * i, dim[i]);
  put_at<std::int16_t>(h, 70, datatype);
  put_at<std::int16_t>(h, 72, bitpix);
  const float pixdim[8] = {1.0f,
                           static_cast<float>(geo.spacing[0]),
                           static_cast<float>(geo.spacing[1]),
                           static_cast<float>(geo.spacing[2]),
                           0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) put_at<float>(h, 76 + 4 * i, pixdim[i]);
  put_at<float>(h, 108, static_cast<float>(kNiftiDataOffset));
  put_at<float>(h, 112, 1.0f);  // scl_slope
  put_at<float>(h, 116, 0.0f);  // scl_inter
  h[123] = 2;                   // xyzt_units: mm
  put_at<std::int16_t>(h, 252, 0);  // qform_code
  put_at<std::int16_t>(h, 254, 1);  // sform_code: scanner
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c)
      put_at<float>(h, 280 + 16 * r + 4 * c,
                    static_cast<float>(geo.direction[3 * r + c] * geo.spacing[c]));
    put_at<float>(h, 280 + 16 * r + 12, static_cast<float>(geo.origin[r]));
  }
  std::memcpy(h.data() + 344, "n+1\0", 4);
  return h;
}

void check_nifti_dims(const Geometry& geo) {
  for (const auto d : geo.dims)
    require(d <= std::numeric_limits<std::int16_t>::max(), ErrorKind::InvalidArgument,
            "NIfTI-1: dimension exceeds int16 range");
}

struct NiftiParsed {
  Geometry geometry;
  std::int16_t datatype;
  std::size_t data_offset;
  float slope;
  float inter;
};

NiftiParsed parse_nifti_header(const std::string& in) {
  require(in.size() >= kNiftiHeader, ErrorKind::Integrity,
          "NIfTI: truncated header (" + std::to_string(in.size()) + " bytes)");
  if (get_at<std::int32_t>(in, 0) != static_cast<std::int32_t>(kNiftiHeader))
    throw ParseError("NIfTI: sizeof_hdr is not 348 (big-endian or not NIfTI-1)", 0);
  if (std::memcmp(in.data() + 344, "n+1\0", 4) != 0)
    throw ParseError("NIfTI: magic is not single-file 'n+1'", 344);
  NiftiParsed p;
  const auto ndim = get_at<std::int16_t>(in, 40);
  if (ndim < 1 || ndim > 7) throw ParseError("NIfTI: dim[0] out of range", 40);
  for (int i = 1; i <= 7; ++i) {
    const auto d = get_at<std::int16_t>(in, 40 + 2 * static_cast<std::size_t>(i));
    if (i <= ndim && d < 1) throw ParseError("NIfTI: non-positive dimension", 40 + 2 * static_cast<std::size_t>(i));
    if (i <= 3) p.geometry.dims[i - 1] = i <= ndim ? d : 1;
    else if (i <= ndim && d != 1) throw ParseError("NIfTI: only 3D volumes are supported", 40 + 2 * static_cast<std::size_t>(i));
  }
  p.datatype = get_at<std::int16_t>(in, 70);
  if (p.datatype != kNiftiInt16 && p.datatype != kNiftiFloat32)
    throw ParseError("NIfTI: unsupported datatype " + std::to_string(p.datatype), 70);
  const auto bitpix = get_at<std::int16_t>(in, 72);
  if (bitpix != (p.datatype == kNiftiInt16 ? 16 : 32)) throw ParseError("NIfTI: bitpix does not match datatype", 72);
  for (int a = 0; a < 3; ++a) {
    const float s = get_at<float>(in, 80 + 4 * static_cast<std::size_t>(a));
    if (!(s > 0.0f) || !std::isfinite(s)) throw ParseError("NIfTI: non-positive pixdim", 80 + 4 * static_cast<std::size_t>(a));
    p.geometry.spacing[a] = s;
  }
  const float vox_offset = get_at<float>(in, 108);
  if (!(vox_offset >= static_cast<float>(kNiftiHeader)) || vox_offset != std::floor(vox_offset))
    throw ParseError("NIfTI: invalid vox_offset", 108);
  p.data_offset = static_cast<std::size_t>(vox_offset);
  p.slope = get_at<float>(in, 112);
  p.inter = get_at<float>(in, 116);

  const auto qform_code = get_at<std::int16_t>(in, 252);
  const auto sform_code = get_at<std::int16_t>(in, 254);
  if (sform_code > 0) {
    Mat3 dir{};
    for (int c = 0; c < 3; ++c) {
      double norm = 0.0;
      for (int r = 0; r < 3; ++r) {
        const double v = get_at<float>(in, 280 + 16 * static_cast<std::size_t>(r) + 4 * static_cast<std::size_t>(c));
        dir[3 * r + c] = v;
        norm += v * v;
      }
      norm = std::sqrt(norm);
      if (!(norm > 0.0)) throw ParseError("NIfTI: degenerate sform", 280);
      for (int r = 0; r < 3; ++r) dir[3 * r + c] /= norm;
    }
    // Re-orthonormalise: float storage leaves ~1e-7 error in the columns.
    Vec3 c0{dir[0], dir[3], dir[6]}, c1{dir[1], dir[4], dir[7]};
    const double d01 = c0[0] * c1[0] + c0[1] * c1[1] + c0[2] * c1[2];
    for (int r = 0; r < 3; ++r) c1[r] -= d01 * c0[r];
    const double n1 = std::sqrt(c1[0] * c1[0] + c1[1] * c1[1] + c1[2] * c1[2]);
    for (int r = 0; r < 3; ++r) c1[r] /= n1;
    Vec3 c2{c0[1] * c1[2] - c0[2] * c1[1], c0[2] * c1[0] - c0[0] * c1[2], c0[0] * c1[1] - c0[1] * c1[0]};
    const double handed = dir[2] * c2[0] + dir[5] * c2[1] + dir[8] * c2[2];
    if (handed < 0) for (auto& v : c2) v = -v;
    p.geometry.direction = {c0[0], c1[0], c2[0], c0[1], c1[1], c2[1], c0[2], c1[2], c2[2]};
    for (int r = 0; r < 3; ++r)
      p.geometry.origin[r] = get_at<float>(in, 280 + 16 * static_cast<std::size_t>(r) + 12);
  } else if (qform_code > 0) {
    const double b = get_at<float>(in, 256), c = get_at<float>(in, 260), d = get_at<float>(in, 264);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const double qfac = get_at<float>(in, 76) < 0 ? -1.0 : 1.0;
    p.geometry.direction = {a * a + b * b - c * c - d * d, 2 * (b * c - a * d), qfac * 2 * (b * d + a * c),
                            2 * (b * c + a * d), a * a + c * c - b * b - d * d, qfac * 2 * (c * d - a * b),
                            2 * (b * d - a * c), 2 * (c * d + a * b), qfac * (a * a + d * d - c * c - b * b)};
    p.geometry.origin = {get_at<float>(in, 268), get_at<float>(in, 272), get_at<float>(in, 276)};
  }
  try {
    p.geometry.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("NIfTI: ") + e.what(), 252);
  }
  return p;
}

template <typename Sample>
std::vector<Sample> nifti_payload(const std::string& in, const NiftiParsed& p) {
  const auto n = static_cast<std::uint64_t>(p.geometry.voxel_count());
  const std::uint64_t bytes = n * (p.datatype == kNiftiInt16 ? 2 : 4);
  require(in.size() >= p.data_offset && in.size() - p.data_offset == bytes, ErrorKind::Integrity,
          "NIfTI: payload is " + std::to_string(in.size() >= p.data_offset ? in.size() - p.data_offset : 0) +
              " bytes, header declares " + std::to_string(bytes));
  std::vector<Sample> out(static_cast<std::size_t>(n));
  const bool scaled = p.slope != 0.0f && std::isfinite(p.slope) && !(p.slope == 1.0f && p.inter == 0.0f);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = p.datatype == kNiftiInt16 ? static_cast<double>(get_at<std::int16_t>(in, p.data_offset + 2 * i))
                                          : static_cast<double>(get_at<float>(in, p.data_offset + 4 * i));
    if (scaled) v = v * p.slope + p.inter;
    out[i] = static_cast<Sample>(v);
  }
  return out;
}

}  // namespace

Format format_for(const std::filesystem::path& path) {
  return path.extension() == ".nii" ? Format::Nifti : Format::Native;
}

std::string encode_nifti_float32(const Volume& v) {
  check_nifti_dims(v.geometry());
  std::string out = nifti_header(v.geometry(), kNiftiFloat32, 32);
  out.append(reinterpret_cast<const char*>(v.data().data()), v.data().size() * sizeof(float));
  return out;
}

Volume decode_nifti(const std::string& bytes) {
  const NiftiParsed p = parse_nifti_header(bytes);
  auto data = nifti_payload<float>(bytes, p);
  for (const float x : data)
    require(std::isfinite(x), ErrorKind::Integrity, "NIfTI: non-finite voxel value");
  return Volume(p.geometry, std::move(data));
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  if (format_for(path) == Format::Nifti)
    fsutil::write_atomic(path, encode_nifti_float32(v));
  else
    fsutil::write_atomic(path, encode_native(v, kDtypeFloat32));
}

Volume load_volume(const std::filesystem::path& path) {
  const std::string bytes = fsutil::read_file(path);
  try {
    if (format_for(path) == Format::Nifti) return decode_nifti(bytes);
    const NativeHeader h = decode_native_header(bytes);
    require(h.dtype == kDtypeFloat32, ErrorKind::Integrity, "native volume: expected float32 payload");
    auto data = native_payload<float>(bytes, h.geometry);
    for (const float x : data)
      require(std::isfinite(x), ErrorKind::Integrity, "native volume: non-finite voxel value");
    return Volume(h.geometry, std::move(data));
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    rethrow_with_context(e, path.string());
  }
}

void save_labels(const LabelMap& m, const std::filesystem::path& path) {
  if (format_for(path) == Format::Nifti) {
    check_nifti_dims(m.geometry());
    std::string out = nifti_header(m.geometry(), kNiftiInt16, 16);
    for (const auto v : m.data()) put(out, static_cast<std::int16_t>(v));
    fsutil::write_atomic(path, out);
  } else {
    fsutil::write_atomic(path, encode_native(m, kDtypeUint8));
  }
}

LabelMap load_labels(const std::filesystem::path& path) {
  const std::string bytes = fsutil::read_file(path);
  try {
    if (format_for(path) == Format::Nifti) {
      const NiftiParsed p = parse_nifti_header(bytes);
      const auto raw = nifti_payload<double>(bytes, p);
      std::vector<std::uint8_t> data(raw.size());
      for (std::size_t i = 0; i < raw.size(); ++i) {
        require(raw[i] == 0.0 || raw[i] == 1.0 || raw[i] == 2.0, ErrorKind::Integrity,
                "label file: value outside {0,1,2}");
        data[i] = static_cast<std::uint8_t>(raw[i]);
      }
      return LabelMap(p.geometry, std::move(data));
    }
    const NativeHeader h = decode_native_header(bytes);
    require(h.dtype == kDtypeUint8, ErrorKind::Integrity, "native labels: expected u8 payload");
    auto data = native_payload<std::uint8_t>(bytes, h.geometry);
    for (const auto v : data) require(v <= 2, ErrorKind::Integrity, "label file: value outside {0,1,2}");
    return LabelMap(h.geometry, std::move(data));
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    rethrow_with_context(e, path.string());
  }
}

}  // namespace udaseg::io
