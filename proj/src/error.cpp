#include "gsqa/error.hpp"

namespace gsqa {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kSchema: return "schema error";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kDomain: return "domain error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kConfig: return "configuration error";
    case ErrorKind::kContract: return "contract error";
    case ErrorKind::kUndefinedMetric: return "undefined metric";
    case ErrorKind::kNotFound: return "not found";
    case ErrorKind::kConflict: return "conflict";
  }
  return "error";
}

}  // namespace gsqa
