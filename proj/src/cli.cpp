#include "mantis/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "mantis/calibration.hpp"
#include "mantis/data.hpp"
#include "mantis/finetune.hpp"
#include "mantis/gemm.hpp"
#include "mantis/logging.hpp"
#include "mantis/pretrain.hpp"
#include "mantis/rng.hpp"

namespace mantis {

namespace {

std::string g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// stdout plus optional metrics file
struct MetricsSink {
  std::ofstream file;

  explicit MetricsSink(const std::string& path) {
    if (!path.empty()) {
      file.open(path);
      if (!file)
        throw std::runtime_error("cannot open metrics file " + path);
    }
  }
  void line(const std::string& s) {
    std::cout << s << "\n";
    if (file.is_open()) file << s << "\n";
  }
};

struct CommonOpts {
  std::string data;
  std::string data_test;
  std::string checkpoint;
  std::string out;
  std::string metrics_out;
  std::string regime = "full";
  std::string adapter = "none";
  int dnew = 0;
  double lr = 2e-4;
  int epochs = 100;
  int batch = 64;
  std::uint64_t seed = 0;
  int bins = 10;
  double crop_max = 0.20;
  int threads = 0;
};

Dataset load_resized(const std::string& path, int target_len) {
  Dataset ds = load_tsv(path);
  if (ds.length != target_len) ds = resize_dataset(ds, target_len);
  return ds;
}

LrSchedule make_schedule(double lr, int epochs) {
  LrSchedule s;
  s.base_lr = static_cast<float>(lr);
  s.total_epochs = epochs;
  s.warmup_epochs = std::min(10, epochs - 1);
  if (s.warmup_epochs < 0) s.warmup_epochs = 0;
  return s;
}

int cmd_pretrain(const CommonOpts& o) {
  Dataset ds = load_resized(o.data, TokenizerConfig{}.input_len);
  MantisConfig cfg;
  Model model = init_mantis<float>(cfg, derive_seed(o.seed, 0x696e6974));
  auto proj_rng = make_rng(derive_seed(o.seed, 0x70726f6a));
  auto projector =
      init_projector<float>(cfg.vit.token_dim, cfg.projector_dim, proj_rng);

  PretrainConfig pc;
  pc.augment.crop_max = static_cast<float>(o.crop_max);
  pc.batch_size = o.batch;
  pc.epochs = o.epochs;
  pc.schedule = make_schedule(o.lr, o.epochs);
  pc.seed = derive_seed(o.seed, 0x70726574);

  MetricsSink sink(o.metrics_out);
  auto result = pretrain_run(model, projector, ds, pc, [&](int epoch, float loss) {
    sink.line("epoch " + std::to_string(epoch) + " split train loss " +
              g9(loss));
  });

  Checkpoint ck;
  ck.cfg = cfg;
  ck.model = model;
  ck.projector = projector;
  save_checkpoint(ck, o.out);
  std::cout << "pretrain done epochs " << o.epochs << " final_loss "
            << g9(result.epoch_losses.empty() ? 0.0
                                              : result.epoch_losses.back())
            << " checkpoint " << o.out << "\n";
  return 0;
}

int cmd_finetune(const CommonOpts& o) {
  const Regime regime = regime_from_name(o.regime);
  const AdapterKind adapter_kind =
      o.adapter == "none" ? AdapterKind::pca : adapter_kind_from_name(o.adapter);
  const bool with_adapter = o.adapter != "none";
  const bool lcomb = with_adapter && adapter_kind == AdapterKind::lcomb;
  if (lcomb && regime != Regime::full && regime != Regime::scratch)
    throw CLI::ValidationError(
        "--adapter lcomb trains with the encoder; use --regime full or scratch");

  MantisConfig cfg;
  Model model;
  std::optional<Projector<float>> projector;
  if (regime == Regime::scratch) {
    if (!o.checkpoint.empty()) {
      Checkpoint in = load_checkpoint(o.checkpoint);
      cfg = in.cfg;  // keep the architecture, drop the weights
    }
    model = init_mantis<float>(cfg, derive_seed(o.seed, 0x696e6974));
  } else {
    Checkpoint in = load_checkpoint(o.checkpoint);
    cfg = in.cfg;
    model = in.model;
    projector = in.projector;
  }

  Dataset full_ds = load_resized(o.data, cfg.tok.input_len);
  if (full_ds.num_classes < 2)
    throw std::runtime_error("finetune: dataset has fewer than 2 classes");

  // adapters: the standalone kinds are fitted unsupervised before training
  std::optional<Adapter> adapter;
  Tensor lcomb_w;
  if (with_adapter) {
    const int d = full_ds.channels;
    const int dnew = o.dnew > 0 ? o.dnew : default_d_new(d, adapter_kind);
    switch (adapter_kind) {
      case AdapterKind::pca:
        adapter = fit_pca(reshape_for_fit(full_ds), dnew);
        break;
      case AdapterKind::svd:
        adapter = fit_svd(reshape_for_fit(full_ds), dnew);
        break;
      case AdapterKind::rand_proj:
        adapter = fit_rand_proj(d, dnew, derive_seed(o.seed, 0x72700000));
        break;
      case AdapterKind::var_selector:
        adapter = fit_var_selector(reshape_for_fit(full_ds), dnew);
        break;
      case AdapterKind::lcomb: {
        auto rng = make_rng(derive_seed(o.seed, 0x6c636f6d));
        lcomb_w = Tensor::randn({dnew, d}, rng,
                                static_cast<float>(1.0 / std::sqrt(double(d))));
        Adapter a;
        a.kind = AdapterKind::lcomb;
        a.d = d;
        a.d_new = dnew;
        adapter = a;  // weights filled in after training
        break;
      }
    }
  }

  MetricsSink sink(o.metrics_out);

  if (regime == Regime::probe) {
    const Adapter* ad = adapter && !lcomb ? &*adapter : nullptr;
    EmbeddingMatrix em = extract_embeddings(model, full_ds, ad);
    LinearProbe probe = linear_probe_fit(em, full_ds.num_classes, 1e-3f);
    const float acc = probe_accuracy(probe, em);
    sink.line("epoch 0 split train loss 0 accuracy " + g9(acc));

    Checkpoint ck;
    ck.cfg = cfg;
    ck.model = model;
    ck.projector = projector;
    ck.probe = probe;
    ck.adapter = adapter;
    save_checkpoint(ck, o.out);
    std::cout << "finetune done regime probe train_acc " << g9(acc)
              << " checkpoint " << o.out << "\n";
    return 0;
  }

  // 80/20 validation split for per-epoch metrics and model selection
  Dataset train = full_ds, val;
  bool has_val = full_ds.size() >= 5;
  if (has_val) {
    auto split = train_val_split(full_ds, 0.8f, derive_seed(o.seed, 0x73706c69));
    train = std::move(split.first);
    val = std::move(split.second);
  }
  const Dataset* train_src = &train;
  const Dataset* val_src = has_val ? &val : nullptr;
  Dataset train_adapted, val_adapted;
  if (adapter && !lcomb) {
    train_adapted = apply_adapter(*adapter, train);
    train_src = &train_adapted;
    if (has_val) {
      val_adapted = apply_adapter(*adapter, val);
      val_src = &val_adapted;
    }
  }

  const int d_eff = lcomb ? adapter->d_new : train_src->channels;
  auto head_rng = make_rng(derive_seed(o.seed, 0x68656164));
  Head<float> head = init_head<float>(d_eff * cfg.vit.token_dim,
                                      full_ds.num_classes, head_rng);

  FinetuneConfig fc;
  fc.regime = regime;
  fc.schedule = make_schedule(o.lr, o.epochs);
  fc.batch_size = o.batch;
  fc.seed = derive_seed(o.seed, 0x66740000);
  fc.train_lcomb = lcomb;

  auto result = finetune(model, head, *train_src, val_src, fc,
                         lcomb ? &lcomb_w : nullptr, [&](const EpochMetrics& m) {
                           sink.line("epoch " + std::to_string(m.epoch) +
                                     " split train loss " + g9(m.train_loss) +
                                     " accuracy " + g9(m.train_acc));
                           if (m.has_val)
                             sink.line("epoch " + std::to_string(m.epoch) +
                                       " split val loss " + g9(m.val_loss) +
                                       " accuracy " + g9(m.val_acc));
                         });

  if (lcomb && adapter) {
    adapter->w.assign(lcomb_w.data(), lcomb_w.data() + lcomb_w.numel());
  }

  Checkpoint ck;
  ck.cfg = cfg;
  ck.model = model;
  ck.projector = projector;
  ck.head = head;
  ck.adapter = adapter;
  save_checkpoint(ck, o.out);

  const auto& last = result.epochs.back();
  const auto& best = result.epochs[std::size_t(result.best_epoch)];
  std::string summary = "finetune done regime " + std::string(regime_name(regime)) +
                        " epochs " + std::to_string(result.epochs.size()) +
                        " last_train_acc " + g9(last.train_acc);
  if (last.has_val)
    summary += " last_val_acc " + g9(last.val_acc) + " best_epoch " +
               std::to_string(result.best_epoch) + " best_val_acc " +
               g9(best.val_acc);
  summary += " checkpoint " + o.out;
  std::cout << summary << "\n";
  return 0;
}

int cmd_embed(const CommonOpts& o) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  Dataset ds = load_resized(o.data, ck.cfg.tok.input_len);
  const Adapter* ad =
      ck.adapter && ck.adapter->kind != AdapterKind::lcomb ? &*ck.adapter : nullptr;
  if (ck.adapter && ck.adapter->kind == AdapterKind::lcomb) ad = &*ck.adapter;
  EmbeddingMatrix em = extract_embeddings(ck.model, ds, ad);

  std::ofstream out(o.out);
  if (!out) throw std::runtime_error("embed: cannot open " + o.out);
  for (int i = 0; i < em.n; ++i) {
    out << (em.labels[std::size_t(i)] >= 0
                ? g9(ds.label_values[std::size_t(em.labels[std::size_t(i)])])
                : "0");
    const float* row = em.row(i);
    for (int j = 0; j < em.dim; ++j) out << '\t' << g9(double(row[j]));
    out << '\n';
  }
  std::cout << "embed done n " << em.n << " dim " << em.dim << " out " << o.out
            << "\n";
  return 0;
}

// logits + labels of a dataset under whatever classifier the checkpoint holds
std::pair<std::vector<double>, std::vector<int>> checkpoint_logits(
    Checkpoint& ck, const Dataset& ds) {
  std::vector<int> labels;
  for (const auto& s : ds.samples) labels.push_back(s.label.value_or(-1));
  const Adapter* ad = ck.adapter ? &*ck.adapter : nullptr;
  if (ck.head) {
    return {dataset_logits(ck.model, *ck.head, ds, ad), labels};
  }
  if (ck.probe) {
    const Adapter* em_ad = ad;
    EmbeddingMatrix em = extract_embeddings(ck.model, ds, em_ad);
    return {probe_dataset_logits(*ck.probe, em), labels};
  }
  throw std::runtime_error("checkpoint holds no classifier (head or probe)");
}

ProbabilityMatrix probs_from_logits(const std::vector<double>& logits, int n,
                                    int k, std::vector<int> labels) {
  TemperatureCorrector identity{1.0};
  return apply_temperature(identity, logits, n, k, std::move(labels));
}

int cmd_evaluate(const CommonOpts& o) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  const std::string path = o.data_test.empty() ? o.data : o.data_test;
  if (path.empty())
    throw CLI::ValidationError("evaluate requires --data-test (or --data)");
  Dataset ds = load_resized(path, ck.cfg.tok.input_len);
  auto [logits, labels] = checkpoint_logits(ck, ds);
  const int k = static_cast<int>(logits.size() / ds.size());
  auto pm = probs_from_logits(logits, static_cast<int>(ds.size()), k, labels);
  long correct = 0;
  for (int i = 0; i < pm.n; ++i)
    if (pm.predictions[std::size_t(i)] == pm.labels[std::size_t(i)]) ++correct;
  const double acc = double(correct) / pm.n;
  std::cout << "accuracy " << g9(acc) << " ece " << g9(ece(pm, o.bins)) << "\n";
  return 0;
}

int cmd_calibrate(const CommonOpts& o) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  if (o.data.empty())
    throw CLI::ValidationError("calibrate requires --data (validation set)");
  Dataset val = load_resized(o.data, ck.cfg.tok.input_len);
  auto [val_logits, val_labels] = checkpoint_logits(ck, val);
  const int k = static_cast<int>(val_logits.size() / val.size());

  Dataset test;
  const Dataset* eval_ds = &val;
  std::vector<double>* eval_logits = &val_logits;
  std::vector<int>* eval_labels = &val_labels;
  std::vector<double> test_logits;
  std::vector<int> test_labels;
  if (!o.data_test.empty()) {
    test = load_resized(o.data_test, ck.cfg.tok.input_len);
    auto got = checkpoint_logits(ck, test);
    test_logits = std::move(got.first);
    test_labels = std::move(got.second);
    eval_ds = &test;
    eval_logits = &test_logits;
    eval_labels = &test_labels;
  }
  const int n_eval = static_cast<int>(eval_ds->size());

  // correctors fitted on the validation data
  auto temp = fit_temperature(val_logits, static_cast<int>(val.size()), k,
                              val_labels);
  auto val_pm = probs_from_logits(val_logits, static_cast<int>(val.size()), k,
                                  val_labels);
  auto iso = fit_isotonic_multiclass(val_pm);

  auto pm_raw = probs_from_logits(*eval_logits, n_eval, k, *eval_labels);
  auto pm_temp = apply_temperature(temp, *eval_logits, n_eval, k, *eval_labels);
  auto pm_iso = apply_isotonic(iso, pm_raw);

  std::ostringstream table;
  table << "stage\tbin_lo\tbin_hi\tcount\taccuracy\tconfidence\n";
  auto emit = [&](const char* stage, const ProbabilityMatrix& pm) {
    BinStats bs = reliability_bins(pm, o.bins);
    for (int j = 0; j < o.bins; ++j)
      table << stage << '\t' << g9(double(j) / o.bins) << '\t'
            << g9(double(j + 1) / o.bins) << '\t' << bs.counts[std::size_t(j)]
            << '\t' << g9(bs.avg_accuracy[std::size_t(j)]) << '\t'
            << g9(bs.avg_confidence[std::size_t(j)]) << '\n';
  };
  emit("raw", pm_raw);
  emit("temperature", pm_temp);
  emit("isotonic", pm_iso);

  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw std::runtime_error("calibrate: cannot open " + o.out);
    f << table.str();
  } else {
    std::cout << table.str();
  }
  std::cout << "temperature " << g9(temp.t) << "\n";
  std::cout << "ece_before " << g9(ece(pm_raw, o.bins)) << " ece_after_temp "
            << g9(ece(pm_temp, o.bins)) << " ece_after_isotonic "
            << g9(ece(pm_iso, o.bins)) << "\n";
  return 0;
}

int cmd_info(const CommonOpts& o) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  const auto& tk = ck.cfg.tok;
  const auto& vt = ck.cfg.vit;
  std::cout << "architecture input_len " << tk.input_len << " patch_count "
            << tk.patch_count << " token_dim " << tk.token_dim
            << " use_differential " << (tk.use_differential ? 1 : 0)
            << " layers " << vt.num_layers << " heads " << vt.num_heads
            << " mlp_hidden " << vt.mlp_hidden << " projector_dim "
            << ck.cfg.projector_dim << "\n";
  std::cout << "head "
            << (ck.head ? "head" : (ck.probe ? "probe" : "none"));
  if (ck.head)
    std::cout << " input_dim " << ck.head->input_dim << " classes "
              << ck.head->num_classes;
  std::cout << "\n";
  if (ck.adapter)
    std::cout << "adapter " << adapter_kind_name(ck.adapter->kind) << " d "
              << ck.adapter->d << " dnew " << ck.adapter->d_new << "\n";
  std::cout << "parameters " << count_parameters(ck.model) << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"mantis: time-series-classification foundation model"};
  app.require_subcommand(1);

  CommonOpts o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "master seed for all randomness");
    sub->add_option("--threads", o.threads, "gemm thread cap (0 = hardware)");
  };

  auto* p_pre = app.add_subcommand("pretrain", "contrastive pre-training");
  p_pre->add_option("--data", o.data, "training TSV")->required();
  p_pre->add_option("--out", o.out, "output checkpoint")->required();
  p_pre->add_option("--epochs", o.epochs, "epochs (default 100)");
  p_pre->add_option("--batch", o.batch, "batch size (default 64)");
  p_pre->add_option("--lr", o.lr, "base learning rate (default 2e-4)");
  p_pre->add_option("--crop-max", o.crop_max, "max crop fraction (default 0.2)");
  p_pre->add_option("--metrics-out", o.metrics_out, "metrics file");
  add_common(p_pre);

  auto* p_ft = app.add_subcommand("finetune", "downstream classification");
  p_ft->add_option("--data", o.data, "training TSV")->required();
  p_ft->add_option("--out", o.out, "output checkpoint")->required();
  p_ft->add_option("--checkpoint", o.checkpoint, "input checkpoint");
  p_ft->add_option("--regime", o.regime, "probe|head|scratch|full");
  p_ft->add_option("--adapter", o.adapter, "none|pca|svd|randproj|varsel|lcomb");
  p_ft->add_option("--dnew", o.dnew, "adapter output channels (default min{d,10})");
  p_ft->add_option("--epochs", o.epochs, "epochs (default 100)");
  p_ft->add_option("--batch", o.batch, "batch size (default 64)");
  p_ft->add_option("--lr", o.lr, "base learning rate (default 2e-4)");
  p_ft->add_option("--metrics-out", o.metrics_out, "metrics file");
  add_common(p_ft);

  auto* p_emb = app.add_subcommand("embed", "frozen-encoder embeddings");
  p_emb->add_option("--data", o.data, "input TSV")->required();
  p_emb->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  p_emb->add_option("--out", o.out, "output TSV")->required();
  add_common(p_emb);

  auto* p_eval = app.add_subcommand("evaluate", "accuracy and calibration error");
  p_eval->add_option("--data-test", o.data_test, "test TSV");
  p_eval->add_option("--data", o.data, "test TSV (alias)");
  p_eval->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  p_eval->add_option("--bins", o.bins, "calibration bins (default 10)");
  add_common(p_eval);

  auto* p_cal = app.add_subcommand("calibrate", "post-hoc probability calibration");
  p_cal->add_option("--data", o.data, "validation TSV (fits the correctors)")
      ->required();
  p_cal->add_option("--data-test", o.data_test, "evaluation TSV");
  p_cal->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  p_cal->add_option("--bins", o.bins, "calibration bins (default 10)");
  p_cal->add_option("--out", o.out, "reliability table TSV");
  add_common(p_cal);

  auto* p_info = app.add_subcommand("info", "checkpoint summary");
  p_info->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  add_common(p_info);

  std::vector<const char*> argv;
  argv.push_back("mantis");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    set_gemm_threads(o.threads);
    if (p_pre->parsed()) return cmd_pretrain(o);
    if (p_ft->parsed()) return cmd_finetune(o);
    if (p_emb->parsed()) return cmd_embed(o);
    if (p_eval->parsed()) return cmd_evaluate(o);
    if (p_cal->parsed()) return cmd_calibrate(o);
    if (p_info->parsed()) return cmd_info(o);
    return 2;
  } catch (const CLI::ValidationError& e) {
    log_error("%s", e.what());
    return 2;
  } catch (const std::exception& e) {
    log_error("%s", e.what());
    return 1;
  }
}

}  // namespace mantis
