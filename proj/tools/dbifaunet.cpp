#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dbifaunet/data.hpp"
#include "dbifaunet/trainer.hpp"

using namespace dbifaunet;

namespace {

std::array<double, 3> parse_ratios(const std::string &s) {
    std::array<double, 3> r{};
    std::stringstream ss(s);
    std::string part;
    int i = 0;
    while (std::getline(ss, part, ',')) {
        if (i == 3) throw ValidationError("--ratios takes three comma-separated values");
        r[i++] = std::stod(part);
    }
    if (i != 3) throw ValidationError("--ratios takes three comma-separated values");
    return r;
}

void print_json(const nlohmann::json &j, const std::string &path) {
    if (path.empty()) {
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << j.dump(2) << "\n";
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"dbifaunet: train, evaluate and run the segmentation network, and prepare sample stores"};
    app.require_subcommand(1);

    // train
    auto *train_cmd = app.add_subcommand("train", "Train a model from a config file");
    std::string config_path, ablation, out_dir, resume;
    std::optional<uint64_t> seed;
    std::vector<std::string> overrides;
    bool verbose = false;
    train_cmd->add_option("--config", config_path, "key = value config file")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--ablation", ablation, "full | no-ddfd-biaf | no-ds");
    train_cmd->add_option("--seed", seed, "Run seed (overrides the config)");
    train_cmd->add_option("--out", out_dir, "Output directory (overrides out_dir)");
    train_cmd->add_option("--set", overrides, "Override any config key: --set key=value");
    train_cmd->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
    train_cmd->add_flag("-v,--verbose", verbose, "Print one line per epoch");

    // eval
    auto *eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    std::string ckpt, split = "test", manifest, json_out;
    eval_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--json", json_out, "Write the report here instead of stdout");

    // predict
    auto *pred_cmd = app.add_subcommand("predict", "Segment one image");
    std::string input, pred_out;
    pred_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    pred_cmd->add_option("--input", input)->required()->check(CLI::ExistingFile);
    pred_cmd->add_option("--out", pred_out)->required();

    // generate-phantoms
    auto *gen_cmd = app.add_subcommand("generate-phantoms", "Write a synthetic phantom sample store");
    PhantomSetOptions gen;
    std::string gen_out, gen_ratios = "0.8,0.1,0.1";
    gen_cmd->add_option("--count", gen.count)->required();
    gen_cmd->add_option("--size", gen.size)->required();
    gen_cmd->add_option("--seed", gen.seed)->required();
    gen_cmd->add_option("--out", gen_out)->required();
    gen_cmd->add_option("--blur", gen.base.blur_radius, "Boundary blur sigma in pixels");
    gen_cmd->add_option("--noise", gen.base.noise_std, "Additive noise std");
    gen_cmd->add_option("--lesion-mean", gen.base.lesion_mean);
    gen_cmd->add_option("--background-mean", gen.base.background_mean);
    gen_cmd->add_option("--ratios", gen_ratios);

    // ingest
    auto *ing_cmd = app.add_subcommand("ingest", "Pair, normalize and split exported images and masks");
    std::string images_dir, masks_dir, ing_out, ing_ratios = "0.8,0.1,0.1";
    uint64_t ing_seed = 0;
    ing_cmd->add_option("--images", images_dir)->required()->check(CLI::ExistingDirectory);
    ing_cmd->add_option("--masks", masks_dir)->required()->check(CLI::ExistingDirectory);
    ing_cmd->add_option("--out", ing_out)->required();
    ing_cmd->add_option("--ratios", ing_ratios);
    ing_cmd->add_option("--seed", ing_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) {
            auto cfg = load_config(config_path);
            for (const auto &o : overrides) {
                const auto eq = o.find('=');
                if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + o + "'");
                set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
            }
            if (!ablation.empty()) cfg.network.ablation = ablation_from_string(ablation);
            if (seed) cfg.train.seed = *seed;
            if (!out_dir.empty()) cfg.train.out_dir = out_dir;
            TrainOptions opts;
            opts.resume_from = resume;
            opts.quiet = !verbose;
            auto rec = train(cfg, opts);
            std::printf("parameters %lld, best epoch %lld, best val dice %.4f\n", static_cast<long long>(rec.parameter_count),
                        static_cast<long long>(rec.best_epoch), rec.best_val_dice);
            if (rec.test) std::printf("test: %s\n", format_row(*rec.test).c_str());
        } else if (*eval_cmd) {
            auto r = evaluate_checkpoint(ckpt, manifest, split);
            print_json(to_json(r), json_out);
            if (!json_out.empty()) std::printf("%s: %s\n", split.c_str(), format_row(r).c_str());
        } else if (*pred_cmd) {
            auto p = predict_file(ckpt, input, pred_out);
            std::printf("%s\n%s\n", p.mask_path.c_str(), p.overlay_path.c_str());
        } else if (*gen_cmd) {
            auto m = write_phantom_store(gen_out, gen, parse_ratios(gen_ratios));
            std::printf("%zu samples (train %zu, val %zu, test %zu) -> %s\n", m.samples.size(), m.train.size(), m.val.size(),
                        m.test.size(), (fs::path(gen_out) / "manifest.json").c_str());
        } else if (*ing_cmd) {
            auto m = ingest(images_dir, masks_dir, ing_out, parse_ratios(ing_ratios), ing_seed);
            std::printf("%zu samples (train %zu, val %zu, test %zu) -> %s\n", m.samples.size(), m.train.size(), m.val.size(),
                        m.test.size(), (fs::path(ing_out) / "manifest.json").c_str());
        }
    } catch (const DivergenceError &e) {
        std::fprintf(stderr, "diverged: %s (epoch %ld, step %ld)\n", e.what(), e.epoch(), e.step());
        return 3;
    } catch (const std::exception &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
