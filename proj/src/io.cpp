#include "c2sti/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

namespace c2sti {

static_assert(std::endian::native == std::endian::little, "CTF payload copy assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'C', 'T', 'F', '1'};
constexpr std::size_t kHeader = 6;
// Largest element count accepted; keeps byte counts far from int64 overflow.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 40;
}  // namespace

const char* ctf_errc_name(CtfErrc code) {
  switch (code) {
    case CtfErrc::Io: return "io";
    case CtfErrc::BadMagic: return "bad-magic";
    case CtfErrc::BadDtype: return "bad-dtype";
    case CtfErrc::BadRank: return "bad-rank";
    case CtfErrc::ExtentOverflow: return "extent-overflow";
    case CtfErrc::Truncated: return "truncated";
    case CtfErrc::TrailingBytes: return "trailing-bytes";
  }
  return "unknown";
}

std::string encode_ctf(const Tensor& t) {
  if (t.ndim() > 255) throw CtfError(CtfErrc::BadRank, "CTF supports at most 255 dimensions");
  std::string out(kMagic, 4);
  out.push_back(static_cast<char>(t.dtype() == DType::F32 ? 0 : 1));
  out.push_back(static_cast<char>(t.ndim()));
  for (auto e : t.shape()) {
    if (e > std::numeric_limits<std::uint32_t>::max()) {
      throw CtfError(CtfErrc::ExtentOverflow, "extent " + std::to_string(e) + " exceeds u32");
    }
    const auto v = static_cast<std::uint32_t>(e);
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
  }
  dispatch(t.dtype(), [&]<typename T>() {
    auto d = t.data<T>();
    const auto* bytes = reinterpret_cast<const char*>(d.data());
    out.append(bytes, d.size_bytes());
  });
  return out;
}

Tensor decode_ctf(const std::string& bytes, int required_rank) {
  if (bytes.size() < 4) throw CtfError(CtfErrc::Truncated, "CTF header truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CtfError(CtfErrc::BadMagic, "bad magic '" + bytes.substr(0, 4) + "'");
  }
  if (bytes.size() < kHeader) throw CtfError(CtfErrc::Truncated, "CTF header truncated");
  const auto code = static_cast<std::uint8_t>(bytes[4]);
  if (code > 1) throw CtfError(CtfErrc::BadDtype, "unknown dtype code " + std::to_string(code));
  const DType dt = code == 0 ? DType::F32 : DType::F64;
  const int ndim = static_cast<std::uint8_t>(bytes[5]);
  if (ndim == 0) throw CtfError(CtfErrc::BadRank, "CTF rank must be positive");
  if (required_rank >= 0 && ndim != required_rank) {
    throw CtfError(CtfErrc::BadRank,
                   "expected rank " + std::to_string(required_rank) + ", file has " + std::to_string(ndim));
  }
  const std::size_t header = kHeader + 4 * static_cast<std::size_t>(ndim);
  if (bytes.size() < header) throw CtfError(CtfErrc::Truncated, "CTF extents truncated");

  Shape shape(static_cast<std::size_t>(ndim));
  std::uint64_t count = 1;
  for (int d = 0; d < ndim; ++d) {
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[kHeader + 4 * d + k])) << (8 * k);
    }
    if (v == 0) throw CtfError(CtfErrc::ExtentOverflow, "zero extent on axis " + std::to_string(d));
    if (count > kMaxElements / v) {
      throw CtfError(CtfErrc::ExtentOverflow, "element count overflows on axis " + std::to_string(d));
    }
    count *= v;
    shape[d] = v;
  }
  const std::uint64_t width = dt == DType::F32 ? 4 : 8;
  const std::uint64_t payload = count * width;
  if (bytes.size() - header < payload) {
    throw CtfError(CtfErrc::Truncated, "payload has " + std::to_string(bytes.size() - header) +
                                           " bytes, need " + std::to_string(payload));
  }
  if (bytes.size() - header > payload) {
    throw CtfError(CtfErrc::TrailingBytes, std::to_string(bytes.size() - header - payload) +
                                               " bytes after payload");
  }
  Tensor t = Tensor::zeros(shape, dt);
  dispatch(dt, [&]<typename T>() { std::memcpy(t.data<T>().data(), bytes.data() + header, payload); });
  return t;
}

void save_ctf(const Tensor& t, const std::filesystem::path& path) {
  const std::string bytes = encode_ctf(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CtfError(CtfErrc::Io, "cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CtfError(CtfErrc::Io, "write failed for " + path.string());
}

Tensor load_ctf(const std::filesystem::path& path, int required_rank) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CtfError(CtfErrc::Io, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode_ctf(bytes, required_rank);
  } catch (const CtfError& e) {
    throw CtfError(e.code(), path.string() + ": " + e.what());
  }
}

}  // namespace c2sti
