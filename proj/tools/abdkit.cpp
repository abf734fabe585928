// abdkit command line: phantom generation, localization, segmentation,
// evaluation, quantification, toy training and the HTTP service.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <algorithm>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "abdkit/error.hpp"
#include "abdkit/locnet.hpp"
#include "abdkit/metrics.hpp"
#include "abdkit/phantom.hpp"
#include "abdkit/segment.hpp"
#include "abdkit/service.hpp"
#include "abdkit/study.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace abdkit;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot read " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
    if (!out.flush()) throw IoError("write failed for " + p.string());
}

// Manifest case paths are relative to the manifest's directory.
struct ManifestCase {
    std::string id;
    fs::path volume;
    fs::path masks;
    LocLabel label;
};

std::vector<ManifestCase> read_manifest(const fs::path& path) {
    const json m = read_json(path);
    validate_manifest(m);
    std::vector<ManifestCase> out;
    for (const auto& c : m["cases"]) {
        out.push_back({c["id"].get<std::string>(), path.parent_path() / c["volume"].get<std::string>(),
                       path.parent_path() / c["masks"].get<std::string>(),
                       {c["label"]["start"].get<int>(), c["label"]["end"].get<int>()}});
    }
    return out;
}

json prediction_json(const LocPrediction& p, double s_ori) {
    return {{"start", p.start},
            {"end", p.end},
            {"start_mm", p.start * s_ori},
            {"end_mm", p.end * s_ori},
            {"swapped", p.swapped}};
}

std::vector<LabelMask> read_masks(const fs::path& p, Spacing* spacing) {
    const RawGrid g = read_grid(p);
    if (spacing) *spacing = g.spacing;
    return ingest_mask_stack(p, {0, g.dims.h, g.dims.w});
}

std::vector<fs::path> mask_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = e.path().extension();
        if (e.is_regular_file() && (ext == ".rawv" || ext == ".nii")) out.push_back(e.path().filename());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"abdkit: abdominal slice localization, tissue segmentation and quantification"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "abdkit 0.1.0");

    // phantom gen
    auto* phantom = app.add_subcommand("phantom", "synthetic CT phantoms");
    phantom->require_subcommand(1);
    auto* gen = phantom->add_subcommand("gen", "write a phantom corpus and manifest.json");
    fs::path gen_out;
    int gen_n = 8;
    std::uint64_t gen_seed = 42;
    std::string gen_family = "standard", gen_preset = "toy";
    double gen_noise = 0.0;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("-n,--count", gen_n, "number of phantoms")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "corpus seed");
    gen->add_option("--family", gen_family, "standard or view_dependent")->check(CLI::IsMember({"standard", "view_dependent"}));
    gen->add_option("--preset", gen_preset, "toy (128x32x32) or full (48x128x128)")->check(CLI::IsMember({"toy", "full"}));
    gen->add_option("--noise", gen_noise, "Gaussian noise sigma in HU")->check(CLI::NonNegativeNumber);

    // locate
    auto* locate = app.add_subcommand("locate", "predict the abdominal slice range with a trained model");
    fs::path loc_volume, loc_manifest, loc_ckpt, loc_out;
    bool loc_json = false;
    auto* loc_vol_opt = locate->add_option("--volume", loc_volume, "RAWV or NIfTI volume");
    auto* loc_man_opt = locate->add_option("--manifest", loc_manifest, "predict every case of a manifest");
    loc_vol_opt->excludes(loc_man_opt);
    locate->add_option("--ckpt", loc_ckpt, "checkpoint from train-toy")->required();
    locate->add_option("--out", loc_out, "write predictions to this JSON file");
    locate->add_flag("--json", loc_json, "print JSON instead of text");

    // segment
    auto* segment = app.add_subcommand("segment", "rule-based tissue segmentation (or mask ingestion)");
    fs::path seg_volume, seg_out, seg_masks, seg_params_file;
    int seg_start = -1, seg_end = -1, seg_threads = 1;
    segment->add_option("--volume", seg_volume, "CT volume")->required();
    segment->add_option("--out", seg_out, "output mask stack (.rawv or .nii)")->required();
    segment->add_option("--masks", seg_masks, "ingest and validate existing masks instead of segmenting");
    segment->add_option("--start", seg_start, "first slice (inclusive)");
    segment->add_option("--end", seg_end, "last slice (inclusive)");
    segment->add_option("--params", seg_params_file, "JSON file with segmentation parameters");
    segment->add_option("--threads", seg_threads, "worker threads")->check(CLI::PositiveNumber);

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "localization and segmentation metrics");
    evaluate->require_subcommand(1);
    auto* ev_loc = evaluate->add_subcommand("loc", "localization error table");
    fs::path ev_pred, ev_gt;
    std::string ev_method = "model";
    bool ev_json = false, ev_pooled = false;
    ev_loc->add_option("--pred", ev_pred, "predictions JSON from locate --out")->required();
    ev_loc->add_option("--gt", ev_gt, "phantom manifest with ground-truth labels")->required();
    ev_loc->add_option("--method", ev_method, "row label");
    ev_loc->add_flag("--json", ev_json, "print JSON");
    auto* ev_seg = evaluate->add_subcommand("seg", "DSC / IoU / HD95 table");
    ev_seg->add_option("--pred", ev_pred, "directory of predicted mask stacks")->required();
    ev_seg->add_option("--gt", ev_gt, "directory of ground-truth mask stacks")->required();
    ev_seg->add_flag("--pooled", ev_pooled, "pool pixel counts over slices instead of averaging per slice");
    ev_seg->add_flag("--json", ev_json, "print JSON");

    // quantify
    auto* quant = app.add_subcommand("quantify", "tissue areas, volumes and mean HU");
    fs::path q_volume, q_masks, q_out;
    std::string q_format = "json";
    quant->add_option("--volume", q_volume, "CT volume")->required();
    quant->add_option("--masks", q_masks, "mask stack on the volume grid")->required();
    quant->add_option("--format", q_format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
    quant->add_option("--out", q_out, "write the report here instead of stdout");

    // train-toy
    auto* train_cmd = app.add_subcommand("train-toy", "train the localization network on a phantom manifest");
    fs::path tr_manifest, tr_out;
    int tr_iters = 300, tr_log_every = 25;
    double tr_lr = 1e-3;
    std::uint64_t tr_seed = 0;
    std::string tr_mode = "multi_view", tr_target = "gaussian";
    train_cmd->add_option("--manifest", tr_manifest, "phantom manifest")->required();
    train_cmd->add_option("--out", tr_out, "checkpoint path")->required();
    train_cmd->add_option("--iterations", tr_iters, "Adam iterations (full batch)")->check(CLI::PositiveNumber);
    train_cmd->add_option("--lr", tr_lr, "learning rate")->check(CLI::NonNegativeNumber);
    train_cmd->add_option("--seed", tr_seed, "initialization seed");
    train_cmd->add_option("--mode", tr_mode, "multi_view or volume_only")->check(CLI::IsMember({"multi_view", "volume_only"}));
    train_cmd->add_option("--target", tr_target, "gaussian or onehot")->check(CLI::IsMember({"gaussian", "onehot"}));
    train_cmd->add_option("--log-every", tr_log_every, "print the loss every n iterations")->check(CLI::PositiveNumber);

    // study
    auto* study_cmd = app.add_subcommand("study", "manage studies served by `serve`");
    study_cmd->require_subcommand(1);
    auto* st_create = study_cmd->add_subcommand("create", "import a volume as a new study");
    fs::path st_dir, st_volume, st_masks, st_ckpt;
    std::string st_id;
    int st_start = -1, st_end = -1;
    st_create->add_option("--data-dir", st_dir, "study root (default $ABDKIT_DATA_DIR)");
    st_create->add_option("--id", st_id, "study id")->required();
    st_create->add_option("--volume", st_volume, "CT volume")->required();
    st_create->add_option("--masks", st_masks, "initial masks (default: baseline segmentation)");
    st_create->add_option("--start", st_start, "manual localization start");
    st_create->add_option("--end", st_end, "manual localization end");
    st_create->add_option("--ckpt", st_ckpt, "localize with this checkpoint");

    // serve
    auto* serve = app.add_subcommand("serve", "HTTP API for the refinement UI");
    fs::path sv_dir, sv_static;
    std::string sv_host = "127.0.0.1";
    int sv_port = 8080;
    serve->add_option("--data-dir", sv_dir, "study root (default $ABDKIT_DATA_DIR)");
    serve->add_option("--host", sv_host, "bind address");
    serve->add_option("--port", sv_port, "port")->check(CLI::Range(1, 65535));
    serve->add_option("--static", sv_static, "serve a UI build from this directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    auto data_dir = [](const fs::path& given) {
        if (!given.empty()) return given;
        if (const char* env = std::getenv("ABDKIT_DATA_DIR")) return fs::path(env);
        throw ValidationError("no study root: pass --data-dir or set ABDKIT_DATA_DIR");
    };

    try {
        if (*gen) {
            const PhantomFamily fam = phantom_family_from_string(gen_family);
            PhantomSpec base = gen_preset == "toy" ? toy_localization_spec(fam) : PhantomSpec{};
            base.family = fam;
            base.noise_sigma_hu = gen_noise;
            const json m = generate_corpus(gen_out, gen_n, base, {}, gen_seed);
            std::printf("wrote %zu phantoms to %s\n", m["cases"].size(), gen_out.string().c_str());
        } else if (*locate) {
            if (loc_volume.empty() == loc_manifest.empty()) throw ValidationError("pass exactly one of --volume, --manifest");
            const LocNet model = load_checkpoint(loc_ckpt);
            json out;
            if (!loc_volume.empty()) {
                const Volume v = load_volume(loc_volume);
                out = prediction_json(predict(model, v), v.spacing().sz);
            } else {
                out = json::array();
                for (const auto& c : read_manifest(loc_manifest)) {
                    const Volume v = load_volume(c.volume);
                    json row = prediction_json(predict(model, v), v.spacing().sz);
                    row["id"] = c.id;
                    out.push_back(row);
                }
            }
            if (!loc_out.empty()) write_text(loc_out, out.dump(2) + "\n");
            if (loc_json || !out.is_object()) {
                std::cout << out.dump(2) << "\n";
            } else {
                std::printf("start %d end %d (%.1f mm .. %.1f mm)\n", out["start"].get<int>(), out["end"].get<int>(),
                            out["start_mm"].get<double>(), out["end_mm"].get<double>());
            }
        } else if (*segment) {
            const Volume v = load_volume(seg_volume);
            const Dims& d = v.dims();
            std::vector<LabelMask> masks;
            if (!seg_masks.empty()) {
                masks = ingest_mask_stack(seg_masks, d);
            } else {
                const SegParams params = seg_params_file.empty() ? SegParams{} : seg_params_from_json(read_json(seg_params_file));
                const int lo = seg_start < 0 ? 0 : seg_start, hi = seg_end < 0 ? d.d - 1 : seg_end;
                if (lo > hi || hi >= d.d) throw RangeError("slice range must satisfy 0 <= start <= end < " + std::to_string(d.d));
                std::vector<int> degenerate;
                masks = segment_volume(v, params, seg_threads, &degenerate);
                for (int k = 0; k < d.d; ++k) {
                    if (k < lo || k > hi) masks[static_cast<std::size_t>(k)] = LabelMask(d.h, d.w);
                }
                for (int k : degenerate) {
                    if (k >= lo && k <= hi) std::fprintf(stderr, "warning: slice %d has no body pixels\n", k);
                }
            }
            save_mask_stack(seg_out, masks, v.spacing());
            std::printf("wrote %d slices to %s\n", d.d, seg_out.string().c_str());
        } else if (*ev_loc) {
            const json preds = read_json(ev_pred);
            std::map<std::string, json> by_id;
            for (const auto& p : preds) by_id[p.at("id").get<std::string>()] = p;
            std::vector<LocEvalInput> cases;
            for (const auto& c : read_manifest(ev_gt)) {
                const auto it = by_id.find(c.id);
                if (it == by_id.end()) throw ValidationError("no prediction for case " + c.id);
                const double s = read_grid(c.volume).spacing.sz;
                cases.push_back({it->second.at("start").get<double>(), double(c.label.start_idx), it->second.at("end").get<double>(),
                                 double(c.label.end_idx), s, s});
            }
            const LocEvalTable t = loc_eval_table(cases);
            if (ev_json) std::cout << to_json(t).dump(2) << "\n";
            else std::cout << format_loc_table(ev_method, t) << "\n";
        } else if (*ev_seg) {
            std::vector<LabelMask> pred_all, gt_all;
            std::optional<Spacing> spacing;
            const auto files = mask_files(ev_gt);
            if (files.empty()) throw ValidationError("no mask stacks in " + ev_gt.string());
            for (const auto& f : files) {
                Spacing sp;
                auto gt = read_masks(ev_gt / f, &sp);
                if (!fs::exists(ev_pred / f)) throw ValidationError("prediction missing for " + f.string());
                auto pred = ingest_mask_stack(ev_pred / f, {static_cast<int>(gt.size()), gt[0].rows, gt[0].cols});
                if (spacing && (spacing->sy != sp.sy || spacing->sx != sp.sx)) {
                    throw ValidationError("ground-truth stacks differ in in-plane spacing");
                }
                spacing = sp;
                gt_all.insert(gt_all.end(), gt.begin(), gt.end());
                pred_all.insert(pred_all.end(), pred.begin(), pred.end());
            }
            const SegScores s = score_segmentation(pred_all, gt_all, spacing->sy, spacing->sx, ev_pooled);
            if (ev_json) std::cout << to_json(s).dump(2) << "\n";
            else std::cout << format_seg_table(s);
        } else if (*quant) {
            const Volume v = load_volume(q_volume);
            const auto masks = ingest_mask_stack(q_masks, v.dims());
            const TissueReport r = quantify(masks, v, 0);
            if (!q_out.empty()) {
                export_report(r, q_format == "csv" ? ReportFormat::csv : ReportFormat::json, q_out);
            } else if (q_format == "csv") {
                std::cout << report_csv(r);
            } else {
                std::cout << to_json(r).dump() << "\n";
            }
        } else if (*train_cmd) {
            const auto cases = read_manifest(tr_manifest);
            LocNetConfig cfg;
            cfg.view_mode = view_mode_from_string(tr_mode);
            cfg.target = target_kind_from_string(tr_target);
            cfg.seed = tr_seed;
            std::vector<Volume> vols;
            std::vector<LocLabel> labels;
            for (const auto& c : cases) {
                vols.push_back(load_volume(c.volume));
                labels.push_back(c.label);
            }
            const PreparedSet set = prepare_set(vols, labels, cfg);
            LocNet model(cfg);
            TrainOptions opt;
            opt.iterations = tr_iters;
            opt.lr = tr_lr;
            opt.on_iteration = [&](int it, double loss) {
                if ((it + 1) % tr_log_every == 0 || it == 0) std::printf("iteration %4d  loss %.6f\n", it + 1, loss);
                std::fflush(stdout);
                return true;
            };
            const TrainResult r = train(model, set.samples(), opt);
            save_checkpoint(tr_out, model, {r.iterations, r.final_loss});
            double err_s = 0, err_e = 0;
            for (std::size_t i = 0; i < vols.size(); ++i) {
                const LocPrediction p = predict_prepared(model, set.volumes[i]);
                err_s += std::abs(p.start - labels[i].start_idx);
                err_e += std::abs(p.end - labels[i].end_idx);
            }
            std::printf("final loss %.6f after %d iterations (%.1f s)\n", r.final_loss, r.iterations, r.seconds);
            std::printf("mean |pred - gt| on the training set: start %.2f, end %.2f slices\n", err_s / vols.size(),
                        err_e / vols.size());
        } else if (*st_create) {
            const fs::path root = data_dir(st_dir);
            const Volume v = load_volume(st_volume);
            StudyInit init;
            if (!st_ckpt.empty()) {
                const LocPrediction p = predict(load_checkpoint(st_ckpt), v);
                init.localization = Localization{p.start, p.end, "model"};
            } else if (st_start >= 0 || st_end >= 0) {
                init.localization = Localization{st_start, st_end, "manual"};
            }
            if (!st_masks.empty()) init.masks = ingest_mask_stack(st_masks, v.dims());
            fs::create_directories(root);
            const auto s = create_study(root, st_id, v, init);
            std::cout << to_json(s->summary()).dump(2) << "\n";
        } else if (*serve) {
            Service service({data_dir(sv_dir), sv_static});
            std::printf("serving %zu studies from %s on http://%s:%d\n", service.store().ids().size(),
                        service.store().root().string().c_str(), sv_host.c_str(), sv_port);
            std::fflush(stdout);
            if (!service.listen(sv_host, sv_port)) throw IoError("cannot listen on " + sv_host + ":" + std::to_string(sv_port));
        }
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    }
    return 0;
}
