#include "dgst/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "dgst/rng.hpp"
#include "dgst/strategy.hpp"
#include "json.hpp"

namespace dgst {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "archive payloads are little-endian raw scalars");

constexpr char kMagic[8] = {'D', 'G', 'S', 'T', 'N', 'T', 'A', '1'};

const char* real_dtype_tag() { return sizeof(real) == 8 ? "f64" : "f32"; }

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct Entry {
  std::string name;
  std::string dtype;
  std::vector<int64_t> shape;
  uint64_t offset = 0;
  uint64_t length = 0;
  std::string checksum;
};

void append_bytes(std::vector<char>& payload, const void* src, size_t n) {
  const size_t at = payload.size();
  payload.resize(at + n);
  std::memcpy(payload.data() + at, src, n);
}

void write_archive(const std::string& path, const json& meta,
                   const std::vector<Entry>& entries,
                   const std::vector<char>& payload) {
  json header;
  header["version"] = 1;
  header["meta"] = meta;
  header["payload_checksum"] = hex64(fnv1a64(payload.data(), payload.size()));
  json jentries = json::array();
  for (const auto& e : entries) {
    json je;
    je["name"] = e.name;
    je["dtype"] = e.dtype;
    je["shape"] = e.shape;
    je["offset"] = e.offset;
    je["length"] = e.length;
    je["checksum"] = e.checksum;
    jentries.push_back(std::move(je));
  }
  header["entries"] = std::move(jentries);
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), std::streamsize(htext.size()));
  out.write(payload.data(), std::streamsize(payload.size()));
  if (!out) throw io_error("write failed for '" + path + "'");
}

struct Archive {
  json header;
  std::vector<char> payload;
};

Archive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw checkpoint_error("corrupt manifest: bad magic in '" + path + "'");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in) throw checkpoint_error("truncated archive '" + path + "'");
  std::string htext(hlen, '\0');
  in.read(htext.data(), std::streamsize(hlen));
  if (!in) throw checkpoint_error("truncated archive '" + path + "'");

  Archive a;
  try {
    a.header = json::parse(htext);
  } catch (const json::exception& e) {
    throw checkpoint_error("corrupt manifest in '" + path + "': " + e.what());
  }
  a.payload.assign(std::istreambuf_iterator<char>(in),
                   std::istreambuf_iterator<char>());

  const std::string want = a.header.value("payload_checksum", "");
  const std::string got = hex64(fnv1a64(a.payload.data(), a.payload.size()));
  if (want != got)
    throw checkpoint_error("payload checksum mismatch in '" + path +
                           "' (archive truncated or corrupted)");
  return a;
}

Entry find_entry(const json& header, const std::string& name,
                 const std::string& path) {
  for (const auto& je : header.at("entries")) {
    if (je.at("name").get<std::string>() != name) continue;
    Entry e;
    e.name = name;
    e.dtype = je.at("dtype").get<std::string>();
    e.shape = je.at("shape").get<std::vector<int64_t>>();
    e.offset = je.at("offset").get<uint64_t>();
    e.length = je.at("length").get<uint64_t>();
    e.checksum = je.at("checksum").get<std::string>();
    return e;
  }
  throw checkpoint_error("entry '" + name + "' missing from '" + path + "'");
}

void read_entry_scalars(const Archive& a, const Entry& e,
                        const std::string& path, Tensor& dst) {
  if (e.dtype != real_dtype_tag())
    throw checkpoint_error("dtype mismatch for entry '" + e.name + "' in '" +
                           path + "': archive has " + e.dtype + ", build uses " +
                           real_dtype_tag());
  if (e.shape != dst.shape)
    throw checkpoint_error("shape mismatch for entry '" + e.name + "' in '" +
                           path + "'");
  if (e.offset + e.length > a.payload.size() ||
      e.length != dst.data.size() * sizeof(real))
    throw checkpoint_error("entry '" + e.name + "' exceeds payload in '" +
                           path + "'");
  if (hex64(fnv1a64(a.payload.data() + e.offset, e.length)) != e.checksum)
    throw checkpoint_error("checksum mismatch for entry '" + e.name + "' in '" +
                           path + "'");
  std::memcpy(dst.data.data(), a.payload.data() + e.offset, e.length);
}

json config_to_json(const ModelConfig& c) {
  json j;
  j["in_channels"] = c.in_channels;
  j["num_classes"] = c.num_classes;
  j["base_width"] = c.base_width;
  j["depth"] = c.depth;
  j["instance_norm"] = c.instance_norm;
  j["norm_eps"] = double(c.norm_eps);
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.instance_norm = j.at("instance_norm").get<bool>();
  c.norm_eps = real(j.at("norm_eps").get<double>());
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::vector<Entry> entries;
  std::vector<char> payload;
  for (const auto& meta : model.registry.params) {
    const Tensor& t = model.param(meta.id);
    Entry e;
    e.name = meta.name;
    e.dtype = real_dtype_tag();
    e.shape = t.shape;
    e.offset = payload.size();
    e.length = t.data.size() * sizeof(real);
    append_bytes(payload, t.data.data(), e.length);
    e.checksum = hex64(fnv1a64(payload.data() + e.offset, e.length));
    entries.push_back(std::move(e));
  }
  json meta;
  meta["kind"] = "model";
  meta["model"] = config_to_json(model.config);
  meta["seed"] = model.init_seed;
  meta["registry_digest"] = hex64(model.registry.digest());
  meta["provenance"] = model.provenance;
  meta["lora_rank"] = model.lora_rank;
  meta["adapter_width"] = model.adapter_width;
  write_archive(path, meta, entries, payload);
}

Model load_checkpoint(const std::string& path) {
  const Archive a = read_archive(path);
  json meta;
  try {
    meta = a.header.at("meta");
    if (meta.at("kind").get<std::string>() != "model")
      throw checkpoint_error("'" + path + "' is not a model checkpoint");
    Model m =
        build_unet(config_from_json(meta.at("model")), meta.at("seed").get<uint64_t>());
    const int lora_rank = meta.at("lora_rank").get<int>();
    const int adapter_width = meta.at("adapter_width").get<int>();
    if (lora_rank > 0) m = lora_inject(m, lora_rank);
    if (adapter_width > 0) m = adapter_inject(m, adapter_width);

    const std::string want_digest = meta.at("registry_digest").get<std::string>();
    if (want_digest != hex64(m.registry.digest()))
      throw checkpoint_error(
          "registry digest mismatch for '" + path +
          "': checkpoint was written for a different model configuration");

    for (const auto& pmeta : m.registry.params)
      read_entry_scalars(a, find_entry(a.header, pmeta.name, path), path,
                         m.param(pmeta.id));
    return m;
  } catch (const json::exception& e) {
    throw checkpoint_error("corrupt manifest in '" + path + "': " + e.what());
  }
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::vector<Entry> entries;
  std::vector<char> payload;
  char name[32];
  for (size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    std::snprintf(name, sizeof(name), "image/%05zu", i);
    Entry ei;
    ei.name = name;
    ei.dtype = real_dtype_tag();
    ei.shape = s.image.shape;
    ei.offset = payload.size();
    ei.length = s.image.data.size() * sizeof(real);
    append_bytes(payload, s.image.data.data(), ei.length);
    ei.checksum = hex64(fnv1a64(payload.data() + ei.offset, ei.length));
    entries.push_back(std::move(ei));

    std::snprintf(name, sizeof(name), "label/%05zu", i);
    Entry el;
    el.name = name;
    el.dtype = "i32";
    el.shape = s.label.shape;
    el.offset = payload.size();
    el.length = s.label.data.size() * sizeof(int32_t);
    append_bytes(payload, s.label.data.data(), el.length);
    el.checksum = hex64(fnv1a64(payload.data() + el.offset, el.length));
    entries.push_back(std::move(el));
  }
  json meta;
  meta["kind"] = "dataset";
  meta["domain"] = data.domain;
  meta["seed"] = data.seed;
  meta["n"] = data.samples.size();
  write_archive(path, meta, entries, payload);

  // sibling JSON manifest for quick inspection / cache validation
  json manifest;
  manifest["domain"] = data.domain;
  manifest["seed"] = data.seed;
  manifest["n"] = data.samples.size();
  manifest["checksum"] = file_sha_hex(path);
  std::ofstream mout(path + ".json", std::ios::trunc);
  if (!mout) throw io_error("cannot write manifest '" + path + ".json'");
  mout << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& path) {
  const Archive a = read_archive(path);
  try {
    const json& meta = a.header.at("meta");
    if (meta.at("kind").get<std::string>() != "dataset")
      throw checkpoint_error("'" + path + "' is not a dataset archive");
    Dataset d;
    d.domain = meta.at("domain").get<std::string>();
    d.seed = meta.at("seed").get<uint64_t>();
    const size_t n = meta.at("n").get<size_t>();
    char name[32];
    for (size_t i = 0; i < n; ++i) {
      SegSample s;
      std::snprintf(name, sizeof(name), "image/%05zu", i);
      Entry ei = find_entry(a.header, name, path);
      s.image = Tensor::zeros(ei.shape);
      read_entry_scalars(a, ei, path, s.image);

      std::snprintf(name, sizeof(name), "label/%05zu", i);
      Entry el = find_entry(a.header, name, path);
      if (el.dtype != "i32")
        throw checkpoint_error("dtype mismatch for entry '" + el.name + "'");
      s.label = IntTensor::zeros(el.shape);
      if (el.offset + el.length > a.payload.size() ||
          el.length != s.label.data.size() * sizeof(int32_t))
        throw checkpoint_error("entry '" + el.name + "' exceeds payload");
      if (hex64(fnv1a64(a.payload.data() + el.offset, el.length)) != el.checksum)
        throw checkpoint_error("checksum mismatch for entry '" + el.name + "'");
      std::memcpy(s.label.data.data(), a.payload.data() + el.offset, el.length);
      d.samples.push_back(std::move(s));
    }
    return d;
  } catch (const json::exception& e) {
    throw checkpoint_error("corrupt manifest in '" + path + "': " + e.what());
  }
}

std::string file_sha_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace dgst
