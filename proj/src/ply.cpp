#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "gsqa/error.hpp"
#include "gsqa/splat.hpp"

namespace gsqa {
namespace {

std::array<std::string, kSplatAttributes> make_canonical_names() {
  std::array<std::string, kSplatAttributes> names;
  std::size_t i = 0;
  for (const char* n : {"x", "y", "z"}) names[i++] = n;
  for (int c = 0; c < 3; ++c) names[i++] = "f_dc_" + std::to_string(c);
  for (int c = 0; c < 45; ++c) names[i++] = "f_rest_" + std::to_string(c);
  names[i++] = "opacity";
  for (int c = 0; c < 3; ++c) names[i++] = "scale_" + std::to_string(c);
  for (int c = 0; c < 4; ++c) names[i++] = "rot_" + std::to_string(c);
  return names;
}

// Slot of a canonical property name inside the [C, O, S, R, SH] attribute
// vector.
std::optional<std::size_t> attribute_slot(const std::string& name) {
  static const std::unordered_map<std::string, std::size_t> slots = [] {
    std::unordered_map<std::string, std::size_t> m;
    m["x"] = 0;
    m["y"] = 1;
    m["z"] = 2;
    m["opacity"] = 3;
    for (std::size_t c = 0; c < 3; ++c) m["scale_" + std::to_string(c)] = 4 + c;
    for (std::size_t c = 0; c < 4; ++c) m["rot_" + std::to_string(c)] = 7 + c;
    for (std::size_t c = 0; c < 3; ++c) m["f_dc_" + std::to_string(c)] = 11 + c;
    for (std::size_t c = 0; c < 45; ++c) m["f_rest_" + std::to_string(c)] = 14 + c;
    return m;
  }();
  const auto it = slots.find(name);
  if (it == slots.end()) return std::nullopt;
  return it->second;
}

std::optional<PlyType> parse_type(const std::string& t) {
  if (t == "char" || t == "int8") return PlyType::kInt8;
  if (t == "uchar" || t == "uint8") return PlyType::kUInt8;
  if (t == "short" || t == "int16") return PlyType::kInt16;
  if (t == "ushort" || t == "uint16") return PlyType::kUInt16;
  if (t == "int" || t == "int32") return PlyType::kInt32;
  if (t == "uint" || t == "uint32") return PlyType::kUInt32;
  if (t == "float" || t == "float32") return PlyType::kFloat32;
  if (t == "double" || t == "float64") return PlyType::kFloat64;
  return std::nullopt;
}

const char* type_name(PlyType t) {
  switch (t) {
    case PlyType::kInt8: return "char";
    case PlyType::kUInt8: return "uchar";
    case PlyType::kInt16: return "short";
    case PlyType::kUInt16: return "ushort";
    case PlyType::kInt32: return "int";
    case PlyType::kUInt32: return "uint";
    case PlyType::kFloat32: return "float";
    case PlyType::kFloat64: return "double";
  }
  return "float";
}

std::size_t type_size(PlyType t) {
  switch (t) {
    case PlyType::kInt8:
    case PlyType::kUInt8: return 1;
    case PlyType::kInt16:
    case PlyType::kUInt16: return 2;
    case PlyType::kInt32:
    case PlyType::kUInt32:
    case PlyType::kFloat32: return 4;
    case PlyType::kFloat64: return 8;
  }
  return 4;
}

enum class Format { kAscii, kBinaryLE, kBinaryBE };

struct Property {
  std::string name;
  PlyType type;
};

struct Header {
  Format format = Format::kAscii;
  std::size_t vertex_count = 0;
  std::vector<Property> properties;
  std::size_t body_offset = 0;
};

[[noreturn]] void header_error(std::size_t line_no, const std::string& line,
                               const std::string& why) {
  fail(ErrorKind::kParse, "PLY header line " + std::to_string(line_no) + " (\"" + line +
                              "\"): " + why);
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream in(line);
  return {std::istream_iterator<std::string>(in), std::istream_iterator<std::string>()};
}

Header parse_header(std::istream& in) {
  Header h;
  std::string line;
  std::size_t line_no = 0;
  bool have_format = false;
  bool in_vertex = false;
  bool seen_vertex = false;
  std::size_t consumed = 0;

  auto next_line = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    consumed += line.size() + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };

  if (!next_line() || line != "ply") {
    header_error(1, line, "expected magic 'ply'");
  }
  while (true) {
    if (!next_line()) header_error(line_no + 1, "", "missing end_header");
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    const std::string& kw = tok[0];
    if (kw == "end_header") break;
    if (kw == "comment" || kw == "obj_info") continue;
    if (kw == "format") {
      if (tok.size() != 3) header_error(line_no, line, "malformed format line");
      if (tok[1] == "ascii") h.format = Format::kAscii;
      else if (tok[1] == "binary_little_endian") h.format = Format::kBinaryLE;
      else if (tok[1] == "binary_big_endian") h.format = Format::kBinaryBE;
      else header_error(line_no, line, "unknown format '" + tok[1] + "'");
      have_format = true;
      continue;
    }
    if (kw == "element") {
      if (tok.size() != 3) header_error(line_no, line, "malformed element line");
      std::size_t count = 0;
      const auto* first = tok[2].data();
      const auto* last = first + tok[2].size();
      const auto [ptr, ec] = std::from_chars(first, last, count);
      if (ec != std::errc() || ptr != last) {
        header_error(line_no, line, "invalid element count");
      }
      if (tok[1] == "vertex") {
        if (seen_vertex) header_error(line_no, line, "duplicate vertex element");
        seen_vertex = true;
        in_vertex = true;
        h.vertex_count = count;
      } else {
        in_vertex = false;
        if (count != 0) {
          header_error(line_no, line, "unsupported non-empty element '" + tok[1] + "'");
        }
      }
      continue;
    }
    if (kw == "property") {
      if (tok.size() >= 2 && tok[1] == "list") {
        if (in_vertex) header_error(line_no, line, "list properties are not supported on vertex");
        continue;
      }
      if (tok.size() != 3) header_error(line_no, line, "malformed property line");
      const auto type = parse_type(tok[1]);
      if (!type) header_error(line_no, line, "unknown property type '" + tok[1] + "'");
      if (!seen_vertex) header_error(line_no, line, "property before any element");
      if (!in_vertex) continue;
      for (const auto& p : h.properties) {
        if (p.name == tok[2]) header_error(line_no, line, "duplicate property '" + tok[2] + "'");
      }
      h.properties.push_back({tok[2], *type});
      continue;
    }
    header_error(line_no, line, "unknown keyword '" + kw + "'");
  }
  if (!have_format) header_error(line_no, line, "missing format line");
  if (!seen_vertex) header_error(line_no, line, "no vertex element declared");
  h.body_offset = consumed;
  return h;
}

template <typename T>
T load_scalar(const unsigned char* p, bool swap) {
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), p, sizeof(T));
  if (swap) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

double decode_binary(PlyType t, const unsigned char* p, bool swap) {
  switch (t) {
    case PlyType::kInt8: return load_scalar<std::int8_t>(p, swap);
    case PlyType::kUInt8: return load_scalar<std::uint8_t>(p, swap);
    case PlyType::kInt16: return load_scalar<std::int16_t>(p, swap);
    case PlyType::kUInt16: return load_scalar<std::uint16_t>(p, swap);
    case PlyType::kInt32: return load_scalar<std::int32_t>(p, swap);
    case PlyType::kUInt32: return load_scalar<std::uint32_t>(p, swap);
    case PlyType::kFloat32: return load_scalar<float>(p, swap);
    case PlyType::kFloat64: return load_scalar<double>(p, swap);
  }
  return 0.0;
}

template <typename T>
void store_le(std::string& out, T v) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  out.append(bytes.data(), bytes.size());
}

void encode_binary(std::string& out, PlyType t, double v) {
  switch (t) {
    case PlyType::kInt8: store_le(out, static_cast<std::int8_t>(v)); break;
    case PlyType::kUInt8: store_le(out, static_cast<std::uint8_t>(v)); break;
    case PlyType::kInt16: store_le(out, static_cast<std::int16_t>(v)); break;
    case PlyType::kUInt16: store_le(out, static_cast<std::uint16_t>(v)); break;
    case PlyType::kInt32: store_le(out, static_cast<std::int32_t>(v)); break;
    case PlyType::kUInt32: store_le(out, static_cast<std::uint32_t>(v)); break;
    case PlyType::kFloat32: store_le(out, static_cast<float>(v)); break;
    case PlyType::kFloat64: store_le(out, v); break;
  }
}

void encode_ascii(std::string& out, PlyType t, double v) {
  std::array<char, 64> buf;
  std::to_chars_result r{};
  switch (t) {
    case PlyType::kFloat32:
      r = std::to_chars(buf.data(), buf.data() + buf.size(), static_cast<float>(v));
      break;
    case PlyType::kFloat64:
      r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
      break;
    default:
      r = std::to_chars(buf.data(), buf.data() + buf.size(), static_cast<long long>(v));
      break;
  }
  out.append(buf.data(), r.ptr);
}

bool parse_ascii_value(std::string_view token, PlyType t, double& out) {
  const char* first = token.data();
  const char* last = first + token.size();
  if (t == PlyType::kFloat32) {
    float f = 0.0F;
    const auto [ptr, ec] = std::from_chars(first, last, f);
    out = f;
    return ec == std::errc() && ptr == last;
  }
  if (t == PlyType::kFloat64) {
    const auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
  }
  long long i = 0;
  const auto [ptr, ec] = std::from_chars(first, last, i);
  out = static_cast<double>(i);
  return ec == std::errc() && ptr == last;
}

}  // namespace

const std::array<std::string, kSplatAttributes>& canonical_property_names() {
  static const auto names = make_canonical_names();
  return names;
}

GaussianCloud read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open PLY file '" + path.string() + "'");
  const Header h = parse_header(in);

  // Map each declared property to an attribute slot or an extras column.
  std::vector<std::optional<std::size_t>> slot_of(h.properties.size());
  std::vector<std::size_t> extra_col_of(h.properties.size(), 0);
  std::array<bool, kSplatAttributes> present{};
  GaussianCloud cloud;
  cloud.source_label = path.string();
  for (std::size_t p = 0; p < h.properties.size(); ++p) {
    slot_of[p] = attribute_slot(h.properties[p].name);
    if (slot_of[p]) {
      present[*slot_of[p]] = true;
    } else {
      extra_col_of[p] = cloud.extras.columns.size();
      cloud.extras.columns.push_back({h.properties[p].name, h.properties[p].type});
    }
  }
  std::string missing;
  for (const auto& name : canonical_property_names()) {
    if (!present[*attribute_slot(name)]) {
      missing += missing.empty() ? name : ", " + name;
    }
  }
  if (!missing.empty()) {
    fail(ErrorKind::kSchema, "PLY vertex element is missing required properties: " + missing);
  }

  const std::size_t n = h.vertex_count;
  const std::size_t width = cloud.extras.columns.size();
  cloud.splats.resize(n);
  cloud.extras.values.resize(n * width);
  std::array<float, kSplatAttributes> attrs{};

  auto assign = [&](std::size_t v, std::size_t p, double value) {
    if (slot_of[p]) {
      attrs[*slot_of[p]] = static_cast<float>(value);
    } else {
      cloud.extras.values[v * width + extra_col_of[p]] = value;
    }
  };

  if (h.format == Format::kAscii) {
    const std::string body{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    std::size_t pos = 0;
    auto next_token = [&](std::string_view& tok) -> bool {
      while (pos < body.size() && std::isspace(static_cast<unsigned char>(body[pos]))) ++pos;
      if (pos >= body.size()) return false;
      const std::size_t start = pos;
      while (pos < body.size() && !std::isspace(static_cast<unsigned char>(body[pos]))) ++pos;
      tok = std::string_view(body).substr(start, pos - start);
      return true;
    };
    for (std::size_t v = 0; v < n; ++v) {
      for (std::size_t p = 0; p < h.properties.size(); ++p) {
        std::string_view tok;
        if (!next_token(tok)) {
          fail(ErrorKind::kIo, "truncated PLY body at byte offset " +
                                   std::to_string(h.body_offset + pos) + " (vertex " +
                                   std::to_string(v) + " of " + std::to_string(n) + ")");
        }
        double value = 0.0;
        if (!parse_ascii_value(tok, h.properties[p].type, value)) {
          fail(ErrorKind::kParse, "invalid value '" + std::string(tok) + "' for property '" +
                                      h.properties[p].name + "' at byte offset " +
                                      std::to_string(h.body_offset + pos - tok.size()));
        }
        assign(v, p, value);
      }
      cloud.splats[v] = GaussianSplat::from_attributes(attrs);
    }
    return cloud;
  }

  std::vector<std::size_t> offsets(h.properties.size());
  std::size_t stride = 0;
  for (std::size_t p = 0; p < h.properties.size(); ++p) {
    offsets[p] = stride;
    stride += type_size(h.properties[p].type);
  }
  const std::size_t needed = n * stride;
  std::vector<unsigned char> body(needed);
  in.read(reinterpret_cast<char*>(body.data()), static_cast<std::streamsize>(needed));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got < needed) {
    fail(ErrorKind::kIo, "truncated PLY body: expected " + std::to_string(needed) +
                             " bytes of vertex data, file ends at byte offset " +
                             std::to_string(h.body_offset + got));
  }
  const bool swap = (h.format == Format::kBinaryBE) != (std::endian::native == std::endian::big);
  for (std::size_t v = 0; v < n; ++v) {
    const unsigned char* row = body.data() + v * stride;
    for (std::size_t p = 0; p < h.properties.size(); ++p) {
      assign(v, p, decode_binary(h.properties[p].type, row + offsets[p], swap));
    }
    cloud.splats[v] = GaussianSplat::from_attributes(attrs);
  }
  return cloud;
}

void write_ply(const GaussianCloud& cloud, const std::filesystem::path& path,
               PlyEncoding encoding) {
  const std::size_t width = cloud.extras.columns.size();
  require(cloud.extras.values.size() == cloud.size() * width, ErrorKind::kContract,
          "extra property table does not match splat count");

  std::string out;
  out += "ply\n";
  out += encoding == PlyEncoding::kAscii ? "format ascii 1.0\n"
                                         : "format binary_little_endian 1.0\n";
  out += "element vertex " + std::to_string(cloud.size()) + "\n";
  for (const auto& name : canonical_property_names()) out += "property float " + name + "\n";
  for (const auto& col : cloud.extras.columns) {
    out += std::string("property ") + type_name(col.type) + " " + col.name + "\n";
  }
  out += "end_header\n";

  std::array<std::size_t, kSplatAttributes> slots{};
  for (std::size_t i = 0; i < kSplatAttributes; ++i) {
    slots[i] = *attribute_slot(canonical_property_names()[i]);
  }

  if (encoding == PlyEncoding::kBinaryLittleEndian) {
    out.reserve(out.size() + cloud.size() * (kSplatAttributes * 4 + width * 8));
  }
  for (std::size_t v = 0; v < cloud.size(); ++v) {
    const auto attrs = cloud.splats[v].attributes();
    if (encoding == PlyEncoding::kBinaryLittleEndian) {
      for (const std::size_t s : slots) store_le(out, attrs[s]);
      for (std::size_t c = 0; c < width; ++c) {
        encode_binary(out, cloud.extras.columns[c].type, cloud.extras.values[v * width + c]);
      }
    } else {
      bool first = true;
      for (const std::size_t s : slots) {
        if (!first) out += ' ';
        first = false;
        encode_ascii(out, PlyType::kFloat32, attrs[s]);
      }
      for (std::size_t c = 0; c < width; ++c) {
        out += ' ';
        encode_ascii(out, cloud.extras.columns[c].type, cloud.extras.values[v * width + c]);
      }
      out += '\n';
    }
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) fail(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) fail(ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

}  // namespace gsqa
