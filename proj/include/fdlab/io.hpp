#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fdlab/digest.hpp"
#include "fdlab/error.hpp"
#include "fdlab/model.hpp"
#include "fdlab/tensor.hpp"

namespace fdlab {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// JSON views of the core value types
// ---------------------------------------------------------------------------

inline Json to_json(const ModelConfig& c) {
  return Json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model},
              {"d_head", c.d_head},     {"d_mlp", c.d_mlp},     {"vocab_size", c.vocab_size},
              {"max_seq", c.max_seq},   {"norm_eps", c.norm_eps}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  try {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_head = j.at("d_head").get<std::size_t>();
    c.d_mlp = j.at("d_mlp").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.norm_eps = j.at("norm_eps").get<float>();
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    fail(ErrorKind::config, std::string("model config: ") + e.what());
  }
}

inline Json to_json(const Provenance& p) {
  Json j{{"seed", p.seed}, {"train_steps", p.train_steps}, {"note", p.note}};
  j["final_loss"] = std::isfinite(p.final_loss) ? Json(p.final_loss) : Json(nullptr);
  return j;
}

inline Provenance provenance_from_json(const Json& j) {
  Provenance p;
  p.seed = j.at("seed").get<std::uint64_t>();
  p.train_steps = j.at("train_steps").get<std::uint64_t>();
  p.note = j.at("note").get<std::string>();
  p.final_loss = j.at("final_loss").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                               : j.at("final_loss").get<double>();
  return p;
}

inline Json shape_json(const Shape& s) { return Json(s); }

// ---------------------------------------------------------------------------
// Versioned little-endian container
//
//   magic[8] | u32 version | u64 header_len | header (UTF-8 JSON)
//   | u64 n_floats | n_floats x f32 | u64 FNV-1a digest of everything before it
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(char((std::uint64_t(value) >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return T(v);
}

}  // namespace detail

struct Container {
  Json header;
  std::vector<float> payload;
};

inline constexpr std::uint32_t kFormatVersion = 1;

using Magic = std::array<char, 8>;
inline constexpr Magic kCheckpointMagic{'F', 'D', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr Magic kTraceMagic{'F', 'D', 'L', 'T', 'R', 'A', 'C', 'E'};
inline constexpr Magic kActsMagic{'F', 'D', 'L', 'A', 'C', 'T', 'S', '\0'};
inline constexpr Magic kSaeMagic{'F', 'D', 'L', 'S', 'A', 'E', '\0', '\0'};

inline std::string encode_container(const Magic& magic, const Json& header, std::span<const float> payload) {
  std::string out(magic.begin(), magic.end());
  detail::put_le<std::uint32_t>(out, kFormatVersion);
  const std::string text = header.dump();
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  detail::put_le<std::uint64_t>(out, payload.size());
  out.reserve(out.size() + payload.size() * 4 + 8);
  for (float f : payload) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  Fnv1a64 h;
  h.update(out);
  detail::put_le<std::uint64_t>(out, h.value());
  return out;
}

inline Container decode_container(const Magic& magic, std::string_view bytes, std::string_view what) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data());
  const std::size_t n = bytes.size();
  auto need = [&](std::size_t upto) {
    require(upto <= n, ErrorKind::corrupt, std::string(what) + ": truncated file");
  };
  need(8 + 4 + 8);
  require(std::memcmp(bytes.data(), magic.data(), 8) == 0, ErrorKind::corrupt,
          std::string(what) + ": bad magic header");
  const auto version = detail::get_le<std::uint32_t>(p + 8);
  require(version == kFormatVersion, ErrorKind::corrupt,
          std::string(what) + ": unsupported format version " + std::to_string(version));
  const auto header_len = detail::get_le<std::uint64_t>(p + 12);
  std::size_t off = 20;
  require(header_len <= n, ErrorKind::corrupt, std::string(what) + ": truncated file");
  need(off + header_len + 8);
  const std::string_view header_text = bytes.substr(off, header_len);
  off += header_len;
  const auto count = detail::get_le<std::uint64_t>(p + off);
  off += 8;
  require(count <= n / 4, ErrorKind::corrupt, std::string(what) + ": truncated file");
  need(off + count * 4 + 8);
  require(off + count * 4 + 8 == n, ErrorKind::corrupt, std::string(what) + ": trailing bytes after payload");
  Fnv1a64 h;
  h.update(bytes.substr(0, off + count * 4));
  const auto stored = detail::get_le<std::uint64_t>(p + off + count * 4);
  require(stored == h.value(), ErrorKind::corrupt,
          std::string(what) + ": digest mismatch (stored " + hex_digest(stored) + ", computed " +
              hex_digest(h.value()) + ")");
  Container c;
  try {
    c.header = Json::parse(header_text);
  } catch (const Json::exception& e) {
    fail(ErrorKind::corrupt, std::string(what) + ": unreadable header: " + e.what());
  }
  c.payload.resize(count);
  for (std::size_t i = 0; i < count; ++i)
    c.payload[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p + off + 4 * i));
  return c;
}

/// Stored digest of an encoded container (its last eight bytes).
inline std::string container_digest(std::string_view encoded) {
  require(encoded.size() >= 8, ErrorKind::corrupt, "container too short for a digest");
  return hex_digest(detail::get_le<std::uint64_t>(reinterpret_cast<const std::uint8_t*>(encoded.data()) +
                                                  encoded.size() - 8));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::io, "cannot open " + path.string() + " for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Write via a sibling temporary and rename, so readers never observe a partial file.
inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".partial");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(bool(out), ErrorKind::io, "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    require(bool(out), ErrorKind::io, "short write to " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorKind::io, "cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

/// Concatenate tensors in order and record their names and shapes.
inline std::vector<float> flatten(std::span<const Tensor* const> tensors) {
  std::size_t total = 0;
  for (const Tensor* t : tensors) total += t->size();
  std::vector<float> out;
  out.reserve(total);
  for (const Tensor* t : tensors) out.insert(out.end(), t->data().begin(), t->data().end());
  return out;
}

/// Slice `payload` back into tensors of the given shapes.
inline std::vector<Tensor> unflatten(std::span<const float> payload, const std::vector<Shape>& shapes,
                                     std::string_view what) {
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (const Shape& s : shapes) {
    const std::size_t n = shape_numel(s);
    require(off + n <= payload.size(), ErrorKind::shape, std::string(what) + ": payload shorter than declared shapes");
    out.emplace_back(s, std::vector<float>(payload.begin() + std::ptrdiff_t(off), payload.begin() + std::ptrdiff_t(off + n)));
    off += n;
  }
  require(off == payload.size(), ErrorKind::shape, std::string(what) + ": payload longer than declared shapes");
  return out;
}

// ---------------------------------------------------------------------------
// .ckpt
// ---------------------------------------------------------------------------

inline std::string encode_checkpoint(const Checkpoint& ck) {
  ck.validate();
  Json tensors = Json::array();
  for (const auto& ns : expected_shapes(ck.config)) tensors.push_back({{"name", ns.name}, {"shape", ns.shape}});
  const Json header{{"kind", "checkpoint"},
                    {"config", to_json(ck.config)},
                    {"provenance", to_json(ck.provenance)},
                    {"tensors", tensors}};
  const auto slots = tensor_list(ck.weights);
  return encode_container(kCheckpointMagic, header, flatten(slots));
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  const Container c = decode_container(kCheckpointMagic, bytes, "checkpoint");
  Checkpoint ck;
  ck.config = model_config_from_json(c.header.at("config"));
  ck.provenance = provenance_from_json(c.header.at("provenance"));
  const auto expected = expected_shapes(ck.config);
  const Json& table = c.header.at("tensors");
  require(table.size() == expected.size(), ErrorKind::shape, "checkpoint: tensor table disagrees with config");
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const Shape declared = table[i].at("shape").get<Shape>();
    require(table[i].at("name").get<std::string>() == expected[i].name && declared == expected[i].shape,
            ErrorKind::shape,
            "checkpoint: tensor " + expected[i].name + " declared " + shape_string(declared) + ", config implies " +
                shape_string(expected[i].shape));
    shapes.push_back(declared);
  }
  auto tensors = unflatten(c.payload, shapes, "checkpoint");
  ck.weights = zeros_like(ck.config);
  auto slots = tensor_list(ck.weights);
  for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = std::move(tensors[i]);
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

/// Content digest of a checkpoint: the digest its encoding carries.
inline std::string checkpoint_digest(const Checkpoint& ck) { return container_digest(encode_checkpoint(ck)); }

// ---------------------------------------------------------------------------
// .trace
// ---------------------------------------------------------------------------

/// `stamp` (optional) is stored verbatim in the header and ignored on load.
inline std::string encode_trace(const Trace& tr, bool omit_head_out = false, const Json& stamp = nullptr) {
  const bool with_heads = tr.has_head_out && !omit_head_out;
  std::vector<const Tensor*> parts;
  for (const auto& l : tr.layers) {
    parts.push_back(&l.resid_pre);
    parts.push_back(&l.attn_pattern);
    if (with_heads) parts.push_back(&l.attn_head_out);
    for (const Tensor* t : {&l.attn_out, &l.mlp_act, &l.mlp_out, &l.resid_post}) parts.push_back(t);
  }
  Tensor scales({tr.final_norm_scale.size()}, tr.final_norm_scale);
  parts.push_back(&scales);
  parts.push_back(&tr.logits);
  const Json header{{"kind", "trace"},
                    {"config", to_json(tr.config)},
                    {"tokens", tr.tokens},
                    {"n_tokens", tr.tokens.size()},
                    {"head_outputs_omitted", !with_heads}};
  Json h = header;
  if (!stamp.is_null()) h["stamp"] = stamp;
  return encode_container(kTraceMagic, h, flatten(parts));
}

inline Trace decode_trace(std::string_view bytes) {
  const Container c = decode_container(kTraceMagic, bytes, "trace");
  Trace tr;
  tr.config = model_config_from_json(c.header.at("config"));
  tr.tokens = c.header.at("tokens").get<Tokens>();
  require(c.header.at("n_tokens").get<std::size_t>() == tr.tokens.size(), ErrorKind::corrupt,
          "trace: token count disagrees with token list");
  check_tokens(tr.config, tr.tokens);
  tr.has_head_out = !c.header.at("head_outputs_omitted").get<bool>();
  const std::size_t s = tr.tokens.size(), d = tr.config.d_model, H = tr.config.n_heads;
  std::vector<Shape> shapes;
  for (std::size_t l = 0; l < tr.config.n_layers; ++l) {
    shapes.push_back({s, d});
    shapes.push_back({H, s, s});
    if (tr.has_head_out) shapes.push_back({H, s, tr.config.d_head});
    shapes.push_back({s, d});
    shapes.push_back({s, tr.config.d_mlp});
    shapes.push_back({s, d});
    shapes.push_back({s, d});
  }
  shapes.push_back({s});
  shapes.push_back({s, tr.config.vocab_size});
  auto tensors = unflatten(c.payload, shapes, "trace");
  std::size_t i = 0;
  tr.layers.resize(tr.config.n_layers);
  for (auto& l : tr.layers) {
    l.resid_pre = std::move(tensors[i++]);
    l.attn_pattern = std::move(tensors[i++]);
    if (tr.has_head_out) l.attn_head_out = std::move(tensors[i++]);
    l.attn_out = std::move(tensors[i++]);
    l.mlp_act = std::move(tensors[i++]);
    l.mlp_out = std::move(tensors[i++]);
    l.resid_post = std::move(tensors[i++]);
  }
  tr.final_norm_scale = tensors[i++].values();
  tr.logits = std::move(tensors[i]);
  return tr;
}

inline void save_trace(const Trace& tr, const std::filesystem::path& path, bool omit_head_out = false,
                       const Json& stamp = nullptr) {
  write_file(path, encode_trace(tr, omit_head_out, stamp));
}

inline Trace load_trace(const std::filesystem::path& path) { return decode_trace(read_file(path)); }

// ---------------------------------------------------------------------------
// .acts: N x d_model activation matrix plus free-form site metadata
// ---------------------------------------------------------------------------

struct ActivationDataset {
  Tensor rows;  // [N, d]
  Json site;    // where the rows were captured (layer, site, position rule, formats, ...)

  std::size_t count() const { return rows.empty() ? 0 : rows.dim(0); }
  std::size_t width() const { return rows.empty() ? 0 : rows.dim(1); }
};

inline std::string encode_activations(const ActivationDataset& ds, const Json& stamp = nullptr) {
  require(ds.rows.rank() == 2, ErrorKind::shape, "activation dataset must be a matrix");
  Json header{{"kind", "activations"}, {"rows", ds.count()}, {"cols", ds.width()}, {"site", ds.site}};
  if (!stamp.is_null()) header["stamp"] = stamp;
  return encode_container(kActsMagic, header, ds.rows.data());
}

inline ActivationDataset decode_activations(std::string_view bytes) {
  Container c = decode_container(kActsMagic, bytes, "activations");
  const auto rows = c.header.at("rows").get<std::size_t>(), cols = c.header.at("cols").get<std::size_t>();
  require(rows * cols == c.payload.size(), ErrorKind::shape, "activations: payload disagrees with rows x cols");
  return ActivationDataset{Tensor({rows, cols}, std::move(c.payload)), c.header.at("site")};
}

inline void save_activations(const ActivationDataset& ds, const std::filesystem::path& path,
                             const Json& stamp = nullptr) {
  write_file(path, encode_activations(ds, stamp));
}

inline ActivationDataset load_activations(const std::filesystem::path& path) {
  return decode_activations(read_file(path));
}

}  // namespace fdlab
