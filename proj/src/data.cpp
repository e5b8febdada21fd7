#include "mantis/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mantis/rng.hpp"

namespace mantis {

Dataset resize_dataset(const Dataset& ds, int target_length) {
  Dataset out = ds;
  out.length = target_length;
  for (auto& s : out.samples) s = resize_linear(s, target_length);
  return out;
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  cells.push_back(cur);
  return cells;
}

double parse_number(const std::string& cell, const std::string& path,
                    std::size_t line_no) {
  const char* s = cell.c_str();
  char* end = nullptr;
  const double v = std::strtod(s, &end);
  if (end == s || *end != '\0' || !std::isfinite(v))
    throw std::runtime_error(path + ":" + std::to_string(line_no) +
                             ": expected number, got '" + cell + "'");
  return v;
}

std::string format_g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

Dataset finalize_labels(Dataset ds, const std::vector<double>& raw_labels) {
  std::set<double> uniq(raw_labels.begin(), raw_labels.end());
  ds.label_values.assign(uniq.begin(), uniq.end());
  std::map<double, int> remap;
  for (std::size_t k = 0; k < ds.label_values.size(); ++k)
    remap[ds.label_values[k]] = static_cast<int>(k);
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    ds.samples[i].label = remap[raw_labels[i]];
  ds.num_classes = static_cast<int>(ds.label_values.size());
  return ds;
}

}  // namespace

Dataset load_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_tsv: cannot open " + path);

  Dataset ds;
  ds.name = path;
  std::vector<double> raw_labels;
  std::string line;
  std::size_t line_no = 0;
  std::size_t cells_per_row = 0;
  int channels = -1;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line, '\t');
    if (cells.size() < 2)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected a label and at least one value");
    if (cells_per_row == 0) {
      cells_per_row = cells.size();
    } else if (cells.size() != cells_per_row) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": ragged row: " + std::to_string(cells.size()) +
                               " cells, expected " +
                               std::to_string(cells_per_row));
    }
    raw_labels.push_back(parse_number(cells[0], path, line_no));

    const int t = static_cast<int>(cells.size()) - 1;
    RawSeries s;
    s.length = t;
    if (channels < 0)
      channels = 1 + static_cast<int>(
                         std::count(cells[1].begin(), cells[1].end(), ':'));
    s.channels = channels;
    s.values.assign(std::size_t(channels) * t, 0.0f);
    for (int i = 0; i < t; ++i) {
      const auto parts = split(cells[std::size_t(i) + 1], ':');
      if (static_cast<int>(parts.size()) != channels)
        throw std::runtime_error(
            path + ":" + std::to_string(line_no) + ": cell has " +
            std::to_string(parts.size()) + " channel values, expected " +
            std::to_string(channels));
      for (int c = 0; c < channels; ++c)
        s.values[std::size_t(c) * t + i] =
            static_cast<float>(parse_number(parts[std::size_t(c)], path, line_no));
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty())
    throw std::runtime_error("load_tsv: " + path + " holds no samples");
  ds.channels = channels;
  ds.length = ds.samples[0].length;
  return finalize_labels(std::move(ds), raw_labels);
}

Dataset load_tsv_channels(const std::vector<std::string>& paths) {
  if (paths.empty())
    throw std::runtime_error("load_tsv_channels: no paths given");
  Dataset first = load_tsv(paths[0]);
  if (first.channels != 1)
    throw std::runtime_error("load_tsv_channels: " + paths[0] +
                             " is not univariate");
  Dataset out = first;
  out.channels = static_cast<int>(paths.size());
  for (auto& s : out.samples)
    s.values.reserve(paths.size() * std::size_t(s.length));
  for (std::size_t c = 1; c < paths.size(); ++c) {
    Dataset ch = load_tsv(paths[c]);
    if (ch.channels != 1 || ch.size() != out.size() || ch.length != out.length)
      throw std::runtime_error("load_tsv_channels: " + paths[c] +
                               " does not match " + paths[0]);
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
      if (ch.samples[i].label != out.samples[i].label)
        throw std::runtime_error("load_tsv_channels: label mismatch at sample " +
                                 std::to_string(i) + " in " + paths[c]);
      out.samples[i].values.insert(out.samples[i].values.end(),
                                   ch.samples[i].values.begin(),
                                   ch.samples[i].values.end());
      out.samples[i].channels = static_cast<int>(c) + 1;
    }
  }
  return out;
}

void write_tsv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_tsv: cannot open " + path);
  for (const auto& s : ds.samples) {
    const double label =
        s.label ? ds.label_values[std::size_t(*s.label)] : 0.0;
    out << format_g9(label);
    for (int i = 0; i < s.length; ++i) {
      out << '\t';
      for (int c = 0; c < s.channels; ++c) {
        if (c) out << ':';
        out << format_g9(double(s.values[std::size_t(c) * s.length + i]));
      }
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write_tsv: write failed for " + path);
}

SyntheticKind synthetic_kind_from_name(const std::string& name) {
  if (name == "two_cluster") return SyntheticKind::two_cluster;
  if (name == "sine_vs_square") return SyntheticKind::sine_vs_square;
  if (name == "multichannel_redundant")
    return SyntheticKind::multichannel_redundant;
  throw std::invalid_argument("unknown synthetic kind: " + name);
}

Dataset make_synthetic(SyntheticKind kind, int n, int t, int d,
                       std::uint64_t seed, float noise) {
  if (n < 4) throw std::invalid_argument("make_synthetic: n must be >= 4");
  if (t < 8 || d < 1)
    throw std::invalid_argument("make_synthetic: invalid t or d");
  Dataset ds;
  ds.name = "synthetic";
  ds.channels = d;
  ds.length = t;
  ds.num_classes = 2;
  ds.label_values = {0.0, 1.0};

  for (int i = 0; i < n; ++i) {
    auto rng = make_rng(derive_seed(seed, std::uint64_t(i), 0x53594e54));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const int label = i % 2;
    RawSeries s;
    s.channels = d;
    s.length = t;
    s.label = label;
    s.values.assign(std::size_t(d) * t, 0.0f);

    auto bump = [&](float* dst, double center_frac, double amp) {
      const double mu = center_frac * t;
      const double w = t / 16.0;
      for (int j = 0; j < t; ++j) {
        const double z = (j - mu) / w;
        dst[j] += static_cast<float>(amp * std::exp(-0.5 * z * z));
      }
    };

    switch (kind) {
      case SyntheticKind::two_cluster: {
        const double amp = 1.0 + 0.2 * (unif(rng) - 0.5);
        const double center = label == 0 ? 0.35 : 0.65;
        for (int c = 0; c < d; ++c) {
          float* ch = s.values.data() + std::size_t(c) * t;
          bump(ch, center, amp);
          for (int j = 0; j < t; ++j)
            ch[j] += noise * static_cast<float>(gauss(rng));
        }
        break;
      }
      case SyntheticKind::sine_vs_square: {
        const double freq = 2.0 + 3.0 * unif(rng);
        const double phase = 2.0 * M_PI * unif(rng);
        for (int c = 0; c < d; ++c) {
          float* ch = s.values.data() + std::size_t(c) * t;
          for (int j = 0; j < t; ++j) {
            const double arg = 2.0 * M_PI * freq * j / t + phase;
            const double v = label == 0 ? std::sin(arg)
                                        : (std::sin(arg) >= 0 ? 1.0 : -1.0);
            ch[j] = static_cast<float>(v) +
                    noise * static_cast<float>(gauss(rng));
          }
        }
        break;
      }
      case SyntheticKind::multichannel_redundant: {
        const double center = label == 0 ? 0.35 : 0.65;
        for (int c = 0; c < d; ++c) {
          float* ch = s.values.data() + std::size_t(c) * t;
          if (c < 2) {
            bump(ch, c == 0 ? center : 1.0 - center, 1.0);
            for (int j = 0; j < t; ++j)
              ch[j] += noise * static_cast<float>(gauss(rng));
          } else {
            for (int j = 0; j < t; ++j)
              ch[j] = 0.1f * static_cast<float>(gauss(rng));
          }
        }
        break;
      }
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kMagic = "mantis-checkpoint v1";

struct TensorEntry {
  std::string name;
  Shape shape;
  float* data;  // borrowed
  std::size_t offset = 0;
};

// Stable serialization order over every stored tensor.
template <class Fn>
void visit_tensors(Checkpoint& ck, Fn&& fn) {
  ck.model.for_each_param(
      [&](const std::string& name, Tensor& t) { fn(name, t.shape(), t.data()); });
  if (ck.projector)
    ck.projector->for_each_param(
        [&](const std::string& name, Tensor& t) { fn(name, t.shape(), t.data()); });
  if (ck.head)
    ck.head->for_each_param(
        [&](const std::string& name, Tensor& t) { fn(name, t.shape(), t.data()); });
  if (ck.probe) {
    fn("probe.weight", Shape{ck.probe->num_classes, ck.probe->input_dim},
       ck.probe->w.data());
    fn("probe.bias", Shape{ck.probe->num_classes}, ck.probe->b.data());
  }
  if (ck.adapter) {
    auto& a = *ck.adapter;
    if (a.kind == AdapterKind::var_selector) {
      // indices stored as floats; exact for any realistic channel count
      static thread_local std::vector<float> idx_buf;
      idx_buf.assign(a.indices.begin(), a.indices.end());
      fn("adapter.indices", Shape{a.d_new}, idx_buf.data());
    } else {
      fn("adapter.w", Shape{a.d_new, a.d}, a.w.data());
      if (a.kind == AdapterKind::pca)
        fn("adapter.mean", Shape{a.d}, a.mean.data());
    }
  }
}

std::string head_kind_name(const Checkpoint& ck) {
  if (ck.head) return "head";
  if (ck.probe) return "probe";
  return "none";
}

}  // namespace

void save_checkpoint(Checkpoint& ck, const std::string& path) {
  std::ostringstream header;
  header << kMagic << "\n";
  const auto& tk = ck.cfg.tok;
  const auto& vt = ck.cfg.vit;
  header << "field input_len " << tk.input_len << "\n";
  header << "field patch_count " << tk.patch_count << "\n";
  header << "field token_dim " << tk.token_dim << "\n";
  header << "field conv_kernel " << tk.conv_kernel << "\n";
  header << "field conv_stride " << tk.conv_stride << "\n";
  header << "field conv_pad " << tk.conv_pad << "\n";
  header << "field stat_scales " << tk.stat_scales << "\n";
  header << "field stat_dim " << tk.stat_dim << "\n";
  header << "field use_differential " << (tk.use_differential ? 1 : 0) << "\n";
  header << "field norm_eps " << format_g9(tk.norm_eps) << "\n";
  header << "field num_layers " << vt.num_layers << "\n";
  header << "field num_heads " << vt.num_heads << "\n";
  header << "field mlp_hidden " << vt.mlp_hidden << "\n";
  header << "field dropout_rate " << format_g9(vt.dropout_rate) << "\n";
  header << "field ln_eps " << format_g9(vt.ln_eps) << "\n";
  header << "field projector_dim " << ck.cfg.projector_dim << "\n";
  header << "field head_kind " << head_kind_name(ck) << "\n";
  if (ck.head) {
    header << "field head_input_dim " << ck.head->input_dim << "\n";
    header << "field head_classes " << ck.head->num_classes << "\n";
  }
  if (ck.probe) {
    header << "field probe_input_dim " << ck.probe->input_dim << "\n";
    header << "field probe_classes " << ck.probe->num_classes << "\n";
  }
  header << "field has_projector " << (ck.projector ? 1 : 0) << "\n";
  header << "field adapter_kind "
         << (ck.adapter ? adapter_kind_name(ck.adapter->kind) : "none") << "\n";
  if (ck.adapter) {
    header << "field adapter_d " << ck.adapter->d << "\n";
    header << "field adapter_dnew " << ck.adapter->d_new << "\n";
  }

  std::size_t offset = 0;
  std::vector<TensorEntry> entries;
  visit_tensors(ck, [&](const std::string& name, const Shape& shape, float* data) {
    TensorEntry e{name, shape, data, offset};
    offset += numel_of(shape) * sizeof(float);
    entries.push_back(std::move(e));
  });
  for (const auto& e : entries) {
    header << "tensor " << e.name << " " << e.shape.size();
    for (int dsz : e.shape) header << " " << dsz;
    header << " " << e.offset << " " << numel_of(e.shape) * sizeof(float)
           << "\n";
  }
  header << "\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& e : entries)
    out.write(reinterpret_cast<const char*>(e.data),
              static_cast<std::streamsize>(numel_of(e.shape) * sizeof(float)));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);

  std::string line;
  if (!std::getline(in, line) || line != kMagic)
    throw std::runtime_error("load_checkpoint: " + path +
                             ": not a recognized checkpoint version (expected '" +
                             kMagic + "')");

  std::map<std::string, std::string> fields;
  struct DirEntry {
    Shape shape;
    std::size_t offset;
    std::size_t bytes;
  };
  std::vector<std::pair<std::string, DirEntry>> directory;

  while (std::getline(in, line) && !line.empty()) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "field") {
      std::string key, value;
      ls >> key >> value;
      if (key.empty() || value.empty())
        throw std::runtime_error("load_checkpoint: malformed field line: " + line);
      fields[key] = value;
    } else if (kind == "tensor") {
      std::string name;
      int rank;
      ls >> name >> rank;
      DirEntry e;
      for (int i = 0; i < rank; ++i) {
        int dsz;
        ls >> dsz;
        e.shape.push_back(dsz);
      }
      ls >> e.offset >> e.bytes;
      if (!ls)
        throw std::runtime_error("load_checkpoint: malformed tensor line: " + line);
      directory.emplace_back(name, e);
    } else {
      throw std::runtime_error(
          "load_checkpoint: unknown header entry '" + kind +
          "' (file written by a newer format version?)");
    }
  }

  auto field_int = [&](const std::string& key) {
    auto it = fields.find(key);
    if (it == fields.end())
      throw std::runtime_error("load_checkpoint: missing field " + key);
    return std::stoi(it->second);
  };
  auto field_float = [&](const std::string& key) {
    auto it = fields.find(key);
    if (it == fields.end())
      throw std::runtime_error("load_checkpoint: missing field " + key);
    return std::stof(it->second);
  };
  auto field_str = [&](const std::string& key) {
    auto it = fields.find(key);
    if (it == fields.end())
      throw std::runtime_error("load_checkpoint: missing field " + key);
    return it->second;
  };

  Checkpoint ck;
  ck.cfg.tok.input_len = field_int("input_len");
  ck.cfg.tok.patch_count = field_int("patch_count");
  ck.cfg.tok.token_dim = field_int("token_dim");
  ck.cfg.tok.conv_kernel = field_int("conv_kernel");
  ck.cfg.tok.conv_stride = field_int("conv_stride");
  ck.cfg.tok.conv_pad = field_int("conv_pad");
  ck.cfg.tok.stat_scales = field_int("stat_scales");
  ck.cfg.tok.stat_dim = field_int("stat_dim");
  ck.cfg.tok.use_differential = field_int("use_differential") != 0;
  ck.cfg.tok.norm_eps = field_float("norm_eps");
  ck.cfg.vit.token_dim = ck.cfg.tok.token_dim;
  ck.cfg.vit.num_layers = field_int("num_layers");
  ck.cfg.vit.num_heads = field_int("num_heads");
  ck.cfg.vit.mlp_hidden = field_int("mlp_hidden");
  ck.cfg.vit.dropout_rate = field_float("dropout_rate");
  ck.cfg.vit.ln_eps = field_float("ln_eps");
  ck.cfg.projector_dim = field_int("projector_dim");

  ck.model = init_mantis<float>(ck.cfg, 0);
  std::mt19937 scratch_rng(0);
  if (field_int("has_projector"))
    ck.projector = init_projector<float>(ck.cfg.tok.token_dim,
                                         ck.cfg.projector_dim, scratch_rng);
  const std::string head_kind = field_str("head_kind");
  if (head_kind == "head") {
    ck.head = init_head<float>(field_int("head_input_dim"),
                               field_int("head_classes"), scratch_rng);
  } else if (head_kind == "probe") {
    LinearProbe p;
    p.input_dim = field_int("probe_input_dim");
    p.num_classes = field_int("probe_classes");
    p.w.assign(std::size_t(p.num_classes) * p.input_dim, 0.0f);
    p.b.assign(std::size_t(p.num_classes), 0.0f);
    ck.probe = std::move(p);
  } else if (head_kind != "none") {
    throw std::runtime_error("load_checkpoint: unknown head_kind " + head_kind);
  }
  const std::string adapter_kind = field_str("adapter_kind");
  if (adapter_kind != "none") {
    Adapter a;
    a.kind = adapter_kind_from_name(adapter_kind);
    a.d = field_int("adapter_d");
    a.d_new = field_int("adapter_dnew");
    if (a.kind == AdapterKind::var_selector) {
      a.indices.assign(std::size_t(a.d_new), 0);
    } else {
      a.w.assign(std::size_t(a.d_new) * a.d, 0.0f);
      if (a.kind == AdapterKind::pca) a.mean.assign(std::size_t(a.d), 0.0f);
    }
    ck.adapter = std::move(a);
  }

  // expected tensors, in serialization order
  std::vector<TensorEntry> expected;
  visit_tensors(ck, [&](const std::string& name, const Shape& shape, float* data) {
    expected.push_back(TensorEntry{name, shape, data, 0});
  });
  if (expected.size() != directory.size())
    throw std::runtime_error(
        "load_checkpoint: tensor directory holds " +
        std::to_string(directory.size()) + " entries, architecture needs " +
        std::to_string(expected.size()));

  const std::streampos payload_start = in.tellg();
  in.seekg(0, std::ios::end);
  const std::size_t payload_bytes =
      static_cast<std::size_t>(in.tellg() - payload_start);

  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, dir] = directory[i];
    auto& exp = expected[i];
    if (name != exp.name)
      throw std::runtime_error("load_checkpoint: tensor " + std::to_string(i) +
                               " is '" + name + "', architecture expects '" +
                               exp.name + "'");
    if (dir.shape != exp.shape)
      throw std::runtime_error("load_checkpoint: tensor " + name + " has shape " +
                               shape_str(dir.shape) + ", architecture expects " +
                               shape_str(exp.shape));
    const std::size_t need = numel_of(dir.shape) * sizeof(float);
    if (dir.bytes != need || dir.offset + need > payload_bytes)
      throw std::runtime_error("load_checkpoint: payload truncated: tensor " +
                               name + " needs " + std::to_string(need) +
                               " bytes at offset " + std::to_string(dir.offset));
    in.seekg(payload_start + static_cast<std::streamoff>(dir.offset));
    in.read(reinterpret_cast<char*>(exp.data),
            static_cast<std::streamsize>(need));
    if (!in)
      throw std::runtime_error("load_checkpoint: read failed for tensor " + name);
  }

  // var_selector indices come back from their float staging buffer
  if (ck.adapter && ck.adapter->kind == AdapterKind::var_selector) {
    for (const auto& e : expected)
      if (e.name == "adapter.indices")
        for (int k = 0; k < ck.adapter->d_new; ++k)
          ck.adapter->indices[std::size_t(k)] =
              static_cast<int>(std::lround(e.data[k]));
  }
  return ck;
}

}  // namespace mantis
