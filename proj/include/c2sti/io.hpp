#pragma once

#include <filesystem>
#include <string>

#include "c2sti/tensor.hpp"

namespace c2sti {

/// Reasons a CTF stream is rejected.
enum class CtfErrc {
  Io,              // file could not be opened or written
  BadMagic,        // first four bytes are not "CTF1"
  BadDtype,        // dtype code is neither 0 (f32) nor 1 (f64)
  BadRank,         // ndim is zero, or differs from what the caller required
  ExtentOverflow,  // an extent is zero or the element count overflows
  Truncated,       // header or payload ends early
  TrailingBytes,   // bytes remain after the payload
};

const char* ctf_errc_name(CtfErrc code);

class CtfError : public Error {
 public:
  CtfError(CtfErrc code, const std::string& what) : Error(what), code_(code) {}
  CtfErrc code() const { return code_; }

 private:
  CtfErrc code_;
};

/// Serialized form:
///   "CTF1" | dtype u8 (0=f32, 1=f64) | ndim u8 | ndim x u32 LE extents | LE payload
std::string encode_ctf(const Tensor& t);
/// Parse a complete CTF byte string. `required_rank` < 0 accepts any rank.
Tensor decode_ctf(const std::string& bytes, int required_rank = -1);

void save_ctf(const Tensor& t, const std::filesystem::path& path);
Tensor load_ctf(const std::filesystem::path& path, int required_rank = -1);

}  // namespace c2sti
