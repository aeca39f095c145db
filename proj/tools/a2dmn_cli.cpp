// Command-line surface: phantom dataset generation, binary pretraining,
// 5-fold semantic training with optional encoder transfer, fold-averaged
// evaluation, and the gradient/oracle verification suites.

#include "CLI11.hpp"

#include "a2dmn/checkpoint.hpp"
#include "a2dmn/gradsuite.hpp"
#include "a2dmn/train.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace a2dmn;

namespace {

std::map<std::string, Sample> by_id(const std::vector<Sample>& samples) {
    std::map<std::string, Sample> m;
    for (const auto& s : samples) m.emplace(s.id, s);
    return m;
}

std::vector<Sample> select(const std::map<std::string, Sample>& pool, const std::vector<std::string>& ids) {
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(pool.at(id));
    return out;
}

std::vector<std::string> all_ids(const std::vector<Sample>& samples) {
    std::vector<std::string> ids;
    ids.reserve(samples.size());
    for (const auto& s : samples) ids.push_back(s.id);
    return ids;
}

int cmd_gen_data(int n, std::uint64_t seed, const std::string& out_dir, const PhantomParams& params) {
    std::vector<Sample> samples;
    samples.reserve(n);
    for (int i = 0; i < n; ++i) samples.push_back(generate_phantom(params, seed + i));
    write_manifest(out_dir, samples);
    std::cout << "wrote " << n << " samples to " << out_dir << "\n";
    return 0;
}

int cmd_pretrain(const TrainConfig& cfg, const std::string& data_dir, const std::string& out_path) {
    auto samples = read_manifest(data_dir);
    auto pool = by_id(samples);
    auto ids = all_ids(samples);
    std::mt19937 rng(static_cast<std::uint32_t>(cfg.seed));
    std::shuffle(ids.begin(), ids.end(), rng);
    const size_t nval = std::max<size_t>(1, static_cast<size_t>(std::lround(cfg.val_frac * ids.size())));
    std::vector<std::string> val_ids(ids.begin(), ids.begin() + nval);
    std::vector<std::string> train_ids(ids.begin() + nval, ids.end());

    auto params = build<float>(cfg.arch, cfg.seed, true);
    auto result = pretrain_binary(cfg, std::move(params), select(pool, train_ids), select(pool, val_ids));
    TrainConfig snapshot = cfg;
    snapshot.binary_mode = true;
    nlohmann::json meta = nlohmann::json::parse(snapshot.to_json());
    meta["best_epoch"] = result.best_epoch;
    meta["best_val_loss"] = result.best_val_loss;
    save_checkpoint(out_path, result.best_params, meta.dump());
    std::cout << "pretrain: best val loss " << result.best_val_loss << " at epoch " << result.best_epoch
              << ", checkpoint " << out_path << "\n";
    return 0;
}

int cmd_train(const TrainConfig& cfg, const std::string& data_dir, const std::string& out_dir,
              const std::string& init_encoder) {
    auto samples = read_manifest(data_dir);
    auto pool = by_id(samples);
    auto folds = kfold_split(all_ids(samples), cfg.k_folds, cfg.val_frac, cfg.seed);
    fs::create_directories(out_dir);
    std::ofstream history(fs::path(out_dir) / "history.csv");
    history << "fold,epoch,train_loss,val_loss\n";
    history.precision(17);

    for (size_t f = 0; f < folds.size(); ++f) {
        auto params = build<float>(cfg.arch, cfg.seed + f, false);
        if (!init_encoder.empty()) {
            auto pre = load_checkpoint(init_encoder);
            load_encoder(params, encoder_subset(pre));
        }
        auto result = train(cfg, std::move(params), select(pool, folds[f].train), select(pool, folds[f].val));
        for (size_t e = 0; e < result.history.size(); ++e)
            history << f << ',' << e << ',' << result.history[e].train_loss << ','
                    << result.history[e].val_loss << '\n';
        nlohmann::json meta = nlohmann::json::parse(cfg.to_json());
        meta["fold"] = f;
        meta["best_epoch"] = result.best_epoch;
        meta["best_val_loss"] = result.best_val_loss;
        const auto path = (fs::path(out_dir) / ("fold_" + std::to_string(f) + ".a2dm")).string();
        save_checkpoint(path, result.best_params, meta.dump());
        std::cout << "fold " << f << ": best val loss " << result.best_val_loss << " at epoch "
                  << result.best_epoch << ", checkpoint " << path << "\n";
    }
    return 0;
}

int cmd_eval(const TrainConfig& cfg, const std::string& data_dir, const std::string& ckpt_dir,
             const std::string& out_csv) {
    auto samples = read_manifest(data_dir);
    auto pool = by_id(samples);
    auto folds = kfold_split(all_ids(samples), cfg.k_folds, cfg.val_frac, cfg.seed);

    std::ostringstream csv;
    csv.precision(17);
    csv << "fold,class,iou,hd,aad,defined\n";
    std::array<ClassAverages::Entry, kNumClasses> macro_iou{}, macro_hd{}, macro_aad{};
    for (size_t f = 0; f < folds.size(); ++f) {
        const auto path = (fs::path(ckpt_dir) / ("fold_" + std::to_string(f) + ".a2dm")).string();
        if (!fs::exists(path)) throw std::runtime_error("missing checkpoint " + path);
        auto params = load_checkpoint(path);
        auto avg = evaluate_samples(params, cfg.arch, select(pool, folds[f].test));
        for (int c = 0; c < kNumClasses; ++c) {
            csv << f << ',' << c << ',';
            if (avg.iou[c].defined()) csv << avg.iou[c].mean();
            csv << ',';
            if (avg.hd[c].defined()) csv << avg.hd[c].mean();
            csv << ',';
            if (avg.aad[c].defined()) csv << avg.aad[c].mean();
            csv << ',' << avg.iou[c].defined() << avg.hd[c].defined() << avg.aad[c].defined() << '\n';
            if (avg.iou[c].defined()) { macro_iou[c].sum += avg.iou[c].mean(); macro_iou[c].count += 1; }
            if (avg.hd[c].defined()) { macro_hd[c].sum += avg.hd[c].mean(); macro_hd[c].count += 1; }
            if (avg.aad[c].defined()) { macro_aad[c].sum += avg.aad[c].mean(); macro_aad[c].count += 1; }
        }
    }
    for (int c = 0; c < kNumClasses; ++c) {
        csv << "avg," << c << ',';
        if (macro_iou[c].defined()) csv << macro_iou[c].mean();
        csv << ',';
        if (macro_hd[c].defined()) csv << macro_hd[c].mean();
        csv << ',';
        if (macro_aad[c].defined()) csv << macro_aad[c].mean();
        csv << ',' << macro_iou[c].defined() << macro_hd[c].defined() << macro_aad[c].defined() << '\n';
    }
    std::ofstream out(out_csv);
    if (!out) throw std::runtime_error("cannot write " + out_csv);
    out << csv.str();
    std::cout << "wrote " << out_csv << "\n";
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    bool all_pass = true;
    for (const auto& r : run_gradient_suite(seed)) {
        std::cout << (r.pass() ? "PASS" : "FAIL") << "  " << r.name << ": max rel error "
                  << r.max_rel_error << " (tolerance " << r.tolerance << ")\n";
        all_pass = all_pass && r.pass();
    }
    return all_pass ? 0 : 1;
}

int cmd_oracle(std::uint64_t seed) {
    std::mt19937 rng(static_cast<std::uint32_t>(seed + 321));
    bool ok = true;

    // smoothness loss vs the double-loop oracle on random 8x8 instances
    double worst_sl = 0;
    LossConfig cfg;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> cls(0, 4);
    for (int trial = 0; trial < 100; ++trial) {
        const int N = 2, H = 8, W = 8;
        auto V = make_tensor<double>({N, 1, H, W});
        auto I = make_tensor<double>({N, 1, H, W});
        std::vector<int> labels(V->values.size());
        for (auto& v : V->values) v = 4 * unit(rng);
        for (auto& v : I->values) v = unit(rng);
        for (auto& l : labels) l = cls(rng);
        Tape<double> tape;
        auto loss = smoothness_loss(tape, V, labels, I, cfg);
        worst_sl = std::max(worst_sl,
                            std::abs(loss->values[0] - smoothness_oracle(V->values, labels, I->values,
                                                                         N, H, W, cfg)));
    }
    std::cout << (worst_sl < 1e-10 ? "PASS" : "FAIL")
              << "  smoothness_loss vs oracle, 100 random 8x8 instances: max abs diff " << worst_sl << "\n";
    ok = ok && worst_sl < 1e-10;

    // HD/AAD vs pairwise brute force, IoU vs set counting, random 32x32 maps
    double worst_hd = 0, worst_aad = 0;
    int compared = 0;
    for (int trial = 0; trial < 200; ++trial) {
        LabelMap a, b;
        a.width = a.height = b.width = b.height = 32;
        a.labels.resize(1024);
        b.labels.resize(1024);
        for (auto& v : a.labels) v = static_cast<std::uint8_t>(cls(rng));
        for (auto& v : b.labels) v = static_cast<std::uint8_t>(cls(rng));
        for (int c = 0; c < kNumClasses; ++c) {
            auto h1 = hausdorff(a, b, c), h2 = hausdorff_oracle(a, b, c);
            auto a1 = aad(a, b, c), a2 = aad_oracle(a, b, c);
            if (h1.has_value() != h2.has_value() || a1.has_value() != a2.has_value()) {
                ok = false;
                continue;
            }
            if (h1) { worst_hd = std::max(worst_hd, std::abs(*h1 - *h2)); ++compared; }
            if (a1) worst_aad = std::max(worst_aad, std::abs(*a1 - *a2));
        }
    }
    std::cout << (worst_hd == 0 && worst_aad < 1e-12 ? "PASS" : "FAIL")
              << "  HD/AAD vs pairwise oracle on 200 random 32x32 maps (" << compared
              << " comparisons): max diff hd " << worst_hd << ", aad " << worst_aad << "\n";
    ok = ok && worst_hd == 0 && worst_aad < 1e-12;
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"layered-anatomy ultrasound semantic segmentation"};
    app.require_subcommand(1);

    TrainConfig cfg;
    PhantomParams phantom;
    int gen_n = 40;
    std::string data_dir, out_path = "checkpoint.a2dm", out_dir = "runs", out_csv = "metrics.csv";
    std::string ckpt_dir, init_encoder;
    bool no_smoothness = false, no_augment = false;

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", cfg.seed, "master seed");
        sub->add_option("--image-size", cfg.arch.image_size, "working resolution (multiple of 16)");
        sub->add_option("--scale", cfg.arch.channel_scale, "uniform channel scale (1 = full size)");
        sub->add_option("--epochs", cfg.epochs, "training epochs");
        sub->add_option("--batch", cfg.batch_size, "batch size");
        sub->add_option("--lr", cfg.learning_rate, "Adam learning rate");
        sub->add_option("--val-frac", cfg.val_frac, "validation fraction of the training split");
    };

    auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
    gen->add_option("--n", gen_n, "number of phantoms");
    gen->add_option("--seed", cfg.seed, "base seed");
    gen->add_option("--out", data_dir, "output dataset directory")->required();
    gen->add_option("--width", phantom.width, "canvas width");
    gen->add_option("--height", phantom.height, "canvas height");
    gen->add_option("--tumor-prob", phantom.tumor_probability, "tumor presence probability");

    auto* pre = app.add_subcommand("pretrain", "binary tumor pretraining");
    pre->add_option("--data", data_dir, "dataset directory")->required();
    pre->add_option("--out", out_path, "output checkpoint path");
    add_common(pre);

    auto* tr = app.add_subcommand("train", "5-fold semantic training");
    tr->add_option("--data", data_dir, "dataset directory")->required();
    tr->add_option("--out-dir", out_dir, "directory for per-fold checkpoints");
    tr->add_option("--init-encoder", init_encoder, "checkpoint whose encoder initializes each fold");
    tr->add_option("--folds", cfg.k_folds, "number of cross-validation folds");
    tr->add_flag("--no-smoothness", no_smoothness, "train with Dice loss only");
    tr->add_flag("--no-augment", no_augment, "disable training augmentation");
    tr->add_option("--lambda", cfg.loss.lambda, "smoothness weight");
    tr->add_option("--sigma-alpha", cfg.loss.sigma_alpha, "pixel-smoothness sigma");
    tr->add_option("--sigma-beta", cfg.loss.sigma_beta, "label-smoothness sigma");
    add_common(tr);

    auto* ev = app.add_subcommand("eval", "fold-averaged metrics CSV");
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--ckpt-dir", ckpt_dir, "directory with fold_<k>.a2dm checkpoints")->required();
    ev->add_option("--out", out_csv, "output CSV path");
    ev->add_option("--folds", cfg.k_folds, "number of folds used at training time");
    ev->add_option("--seed", cfg.seed, "seed used at training time (fold split)");
    ev->add_option("--image-size", cfg.arch.image_size, "working resolution");
    ev->add_option("--scale", cfg.arch.channel_scale, "channel scale used at training time");
    ev->add_option("--val-frac", cfg.val_frac, "validation fraction used at training time");

    auto* gc = app.add_subcommand("gradcheck", "double-precision gradient suite");
    gc->add_option("--seed", cfg.seed, "suite seed");

    auto* orc = app.add_subcommand("oracle", "loss and metric oracle comparisons");
    orc->add_option("--seed", cfg.seed, "suite seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << e.what() << "\n" << app.help();
        return 2;
    }

    cfg.smoothness_enabled = !no_smoothness;
    cfg.augment_enabled = !no_augment;
    try {
        if (gen->parsed()) return cmd_gen_data(gen_n, cfg.seed, data_dir, phantom);
        if (pre->parsed()) return cmd_pretrain(cfg, data_dir, out_path);
        if (tr->parsed()) return cmd_train(cfg, data_dir, out_dir, init_encoder);
        if (ev->parsed()) return cmd_eval(cfg, data_dir, ckpt_dir, out_csv);
        if (gc->parsed()) return cmd_gradcheck(cfg.seed);
        if (orc->parsed()) return cmd_oracle(cfg.seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
