// Weight serialisation: a JSON manifest (config + tensor table) next to a raw
// little-endian float32 row-major blob. The fingerprint hashes the logical
// tensors in canonical order, so save -> load -> fingerprint is stable.

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "circuitlab/model.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "weight blobs are little-endian; big-endian hosts are unsupported");

namespace circuitlab::model {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

struct TensorRef {
  std::string name;
  const float* data;
  Eigen::Index rows, cols;  // cols = 1 for vectors; shape in the manifest drops it
  bool is_vector;
};

// canonical enumeration shared by save, load and the fingerprint
template <typename Fn>
void walk_tensors(const ModelWeights& w, Fn&& fn) {
  auto mat = [&](const std::string& name, const MatF& m) {
    fn(TensorRef{name, m.data(), m.rows(), m.cols(), false});
  };
  auto vec = [&](const std::string& name, const VecF& v) {
    fn(TensorRef{name, v.data(), v.size(), 1, true});
  };
  mat("embed", w.embed);
  mat("pos_embed", w.pos_embed);
  for (int l = 0; l < w.config.n_layers; ++l) {
    const auto& b = w.blocks[size_t(l)];
    const std::string p = "blocks." + std::to_string(l) + ".";
    vec(p + "ln1.scale", b.ln1.scale);
    vec(p + "ln1.offset", b.ln1.offset);
    vec(p + "ln2.scale", b.ln2.scale);
    vec(p + "ln2.offset", b.ln2.offset);
    for (int h = 0; h < w.config.n_heads; ++h) {
      const std::string hs = "." + std::to_string(h);
      mat(p + "attn.W_Q" + hs, b.attn.w_q[size_t(h)]);
      mat(p + "attn.W_K" + hs, b.attn.w_k[size_t(h)]);
      mat(p + "attn.W_V" + hs, b.attn.w_v[size_t(h)]);
      mat(p + "attn.W_O" + hs, b.attn.w_o[size_t(h)]);
      if (w.config.use_biases) {
        vec(p + "attn.b_Q" + hs, b.attn.b_q[size_t(h)]);
        vec(p + "attn.b_K" + hs, b.attn.b_k[size_t(h)]);
        vec(p + "attn.b_V" + hs, b.attn.b_v[size_t(h)]);
      }
    }
    if (w.config.use_biases) vec(p + "attn.b_O", b.attn.b_o);
    mat(p + "mlp.W_in", b.mlp.w_in);
    mat(p + "mlp.W_out", b.mlp.w_out);
    if (w.config.use_biases) {
      vec(p + "mlp.b_in", b.mlp.b_in);
      vec(p + "mlp.b_out", b.mlp.b_out);
    }
  }
  vec("ln_f.scale", w.ln_f.scale);
  vec("ln_f.offset", w.ln_f.offset);
  mat("unembed", w.unembed);
}

uint64_t fnv1a(const void* data, size_t len, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string compute_fingerprint(const ModelWeights& w) {
  uint64_t h = 14695981039346656037ULL;
  const int64_t cfg[] = {w.config.n_layers, w.config.n_heads,  w.config.d_model,
                         w.config.d_head,   w.config.d_mlp,    w.config.d_vocab,
                         w.config.use_biases ? 1 : 0, int64_t(w.config.seed)};
  h = fnv1a(cfg, sizeof(cfg), h);
  walk_tensors(w, [&](const TensorRef& t) {
    h = fnv1a(t.name.data(), t.name.size(), h);
    h = fnv1a(t.data, size_t(t.rows) * size_t(t.cols) * sizeof(float), h);
  });
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"d_model", c.d_model},
              {"d_head", c.d_head},     {"d_mlp", c.d_mlp},       {"d_vocab", c.d_vocab},
              {"use_biases", c.use_biases}, {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.d_vocab = j.at("d_vocab").get<int>();
    c.use_biases = j.at("use_biases").get<bool>();
    c.seed = j.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("manifest config invalid: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

void ModelWeights::refresh_fingerprint() { fingerprint = compute_fingerprint(*this); }

void save_weights(const ModelWeights& w, const std::string& manifest_path,
                  const std::string& blob_path) {
  w.validate();

  ordered_json tensors = ordered_json::object();
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  require(blob.good(), ErrorKind::io, "cannot open blob for writing: " + blob_path);
  uint64_t offset = 0;
  walk_tensors(w, [&](const TensorRef& t) {
    ordered_json entry;
    entry["shape"] = t.is_vector ? ordered_json::array({t.rows})
                                 : ordered_json::array({t.rows, t.cols});
    entry["dtype"] = "f32";
    entry["offset"] = offset;
    tensors[t.name] = entry;
    const size_t bytes = size_t(t.rows) * size_t(t.cols) * sizeof(float);
    blob.write(reinterpret_cast<const char*>(t.data), std::streamsize(bytes));
    offset += bytes;
  });
  blob.close();
  require(blob.good(), ErrorKind::io, "short write to blob: " + blob_path);

  ordered_json manifest;
  manifest["format"] = "circuitlab-weights";
  manifest["version"] = 1;
  manifest["config"] = config_to_json(w.config);
  manifest["blob"] = std::filesystem::path(blob_path).filename().string();
  manifest["tensors"] = tensors;
  std::ofstream mf(manifest_path, std::ios::trunc);
  require(mf.good(), ErrorKind::io, "cannot open manifest for writing: " + manifest_path);
  mf << manifest.dump(2) << "\n";
  mf.close();
  require(mf.good(), ErrorKind::io, "short write to manifest: " + manifest_path);
}

ModelWeights load_weights(const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  require(mf.good(), ErrorKind::io, "cannot open manifest: " + manifest_path);
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("manifest is not valid JSON: ") + e.what());
  }
  require(manifest.value("format", "") == "circuitlab-weights", ErrorKind::format,
          "manifest format tag missing or unrecognised");
  require(manifest.value("version", -1) == 1, ErrorKind::format,
          "unsupported manifest version");
  require(manifest.contains("config") && manifest.contains("tensors") &&
              manifest.contains("blob"),
          ErrorKind::format, "manifest missing config/tensors/blob");

  ModelWeights w;
  w.config = config_from_json(manifest["config"]);

  auto blob_rel = manifest["blob"].get<std::string>();
  std::filesystem::path blob_path(blob_rel);
  if (blob_path.is_relative())
    blob_path = std::filesystem::path(manifest_path).parent_path() / blob_path;
  std::ifstream bf(blob_path, std::ios::binary);
  require(bf.good(), ErrorKind::io, "cannot open blob: " + blob_path.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  const json& tensors = manifest["tensors"];
  auto fetch = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols, bool is_vector,
                   bool rows_free, float* dst) -> std::pair<Eigen::Index, Eigen::Index> {
    require(tensors.contains(name), ErrorKind::missing_tensor, "manifest lacks tensor " + name);
    const json& e = tensors[name];
    require(e.value("dtype", "") == "f32", ErrorKind::format, "tensor " + name + " is not f32");
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    Eigen::Index r, cl;
    if (is_vector) {
      require(shape.size() == 1, ErrorKind::shape, "tensor " + name + " should be rank 1");
      r = shape[0];
      cl = 1;
    } else {
      require(shape.size() == 2, ErrorKind::shape, "tensor " + name + " should be rank 2");
      r = shape[0];
      cl = shape[1];
    }
    require((rows_free ? r >= 1 : r == rows) && cl == cols, ErrorKind::shape,
            "tensor " + name + " has unexpected shape");
    const uint64_t off = e.at("offset").get<uint64_t>();
    const size_t bytes = size_t(r) * size_t(cl) * sizeof(float);
    require(off + bytes <= blob.size(), ErrorKind::io,
            "blob too short for tensor " + name);
    if (dst) std::memcpy(dst, blob.data() + off, bytes);
    return {r, cl};
  };

  const auto& c = w.config;
  w.embed.resize(c.d_vocab, c.d_model);
  fetch("embed", c.d_vocab, c.d_model, false, false, w.embed.data());
  {
    // n_ctx comes from the tensor itself
    auto [rows, cols] = fetch("pos_embed", -1, c.d_model, false, true, nullptr);
    w.pos_embed.resize(rows, cols);
    fetch("pos_embed", -1, c.d_model, false, true, w.pos_embed.data());
  }
  w.blocks.resize(size_t(c.n_layers));
  for (int l = 0; l < c.n_layers; ++l) {
    auto& b = w.blocks[size_t(l)];
    const std::string p = "blocks." + std::to_string(l) + ".";
    auto get_vec = [&](const std::string& name, VecF& v, Eigen::Index n) {
      v.resize(n);
      fetch(name, n, 1, true, false, v.data());
    };
    auto get_mat = [&](const std::string& name, MatF& m, Eigen::Index r, Eigen::Index cl) {
      m.resize(r, cl);
      fetch(name, r, cl, false, false, m.data());
    };
    get_vec(p + "ln1.scale", b.ln1.scale, c.d_model);
    get_vec(p + "ln1.offset", b.ln1.offset, c.d_model);
    get_vec(p + "ln2.scale", b.ln2.scale, c.d_model);
    get_vec(p + "ln2.offset", b.ln2.offset, c.d_model);
    b.attn.w_q.resize(size_t(c.n_heads));
    b.attn.w_k.resize(size_t(c.n_heads));
    b.attn.w_v.resize(size_t(c.n_heads));
    b.attn.w_o.resize(size_t(c.n_heads));
    if (c.use_biases) {
      b.attn.b_q.resize(size_t(c.n_heads));
      b.attn.b_k.resize(size_t(c.n_heads));
      b.attn.b_v.resize(size_t(c.n_heads));
    }
    for (int h = 0; h < c.n_heads; ++h) {
      const std::string hs = "." + std::to_string(h);
      get_mat(p + "attn.W_Q" + hs, b.attn.w_q[size_t(h)], c.d_model, c.d_head);
      get_mat(p + "attn.W_K" + hs, b.attn.w_k[size_t(h)], c.d_model, c.d_head);
      get_mat(p + "attn.W_V" + hs, b.attn.w_v[size_t(h)], c.d_model, c.d_head);
      get_mat(p + "attn.W_O" + hs, b.attn.w_o[size_t(h)], c.d_head, c.d_model);
      if (c.use_biases) {
        get_vec(p + "attn.b_Q" + hs, b.attn.b_q[size_t(h)], c.d_head);
        get_vec(p + "attn.b_K" + hs, b.attn.b_k[size_t(h)], c.d_head);
        get_vec(p + "attn.b_V" + hs, b.attn.b_v[size_t(h)], c.d_head);
      }
    }
    if (c.use_biases) get_vec(p + "attn.b_O", b.attn.b_o, c.d_model);
    get_mat(p + "mlp.W_in", b.mlp.w_in, c.d_model, c.d_mlp);
    get_mat(p + "mlp.W_out", b.mlp.w_out, c.d_mlp, c.d_model);
    if (c.use_biases) {
      get_vec(p + "mlp.b_in", b.mlp.b_in, c.d_mlp);
      get_vec(p + "mlp.b_out", b.mlp.b_out, c.d_model);
    }
  }
  w.ln_f.scale.resize(c.d_model);
  fetch("ln_f.scale", c.d_model, 1, true, false, w.ln_f.scale.data());
  w.ln_f.offset.resize(c.d_model);
  fetch("ln_f.offset", c.d_model, 1, true, false, w.ln_f.offset.data());
  w.unembed.resize(c.d_model, c.d_vocab);
  fetch("unembed", c.d_model, c.d_vocab, false, false, w.unembed.data());

  w.validate();  // also rejects non-finite payloads
  w.refresh_fingerprint();
  return w;
}

}  // namespace circuitlab::model
