#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "paradis/paradis.hpp"

using namespace paradis;
using json = nlohmann::json;

namespace {

struct UsageError : Error {
    using Error::Error;
};

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Opens `path` for writing, or returns std::cout for "-".
class Output {
public:
    explicit Output(const std::string& path) {
        if (path != "-") {
            file_.open(path, std::ios::trunc);
            if (!file_) throw Error("cannot write " + path);
        }
    }
    std::ostream& get() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

private:
    std::ofstream file_;
};

std::string meta(const Checkpoint<float>& ck, const std::string& key, const std::string& def = "") {
    auto it = ck.metadata.find(key);
    return it == ck.metadata.end() ? def : it->second;
}

void check_shape(const ElasticModel<float>& model, const Dataset& d) {
    const auto& m = model.manifest();
    const Shape want{m.in_channels, m.in_height, m.in_width};
    if (d.size() > 0 && d.sample_shape() != want)
        throw ConfigError({"dataset samples are " + to_string(d.sample_shape()) + " but the model expects " + to_string(want)});
    if (d.num_classes > m.num_classes)
        throw ConfigError({"dataset has " + std::to_string(d.num_classes) + " classes, model has " + std::to_string(m.num_classes)});
}

// The train and eval splits of the dataset a checkpoint was trained on,
// unless `override_spec` names another one.
std::pair<Dataset, Dataset> splits_for(const Checkpoint<float>& ck, const std::string& override_spec) {
    const std::string text = override_spec.empty() ? meta(ck, "dataset") : override_spec;
    if (text.empty()) throw UsageError("checkpoint records no dataset; pass --dataset");
    const auto spec = DatasetSpec::parse(text);
    auto parts = split(make_dataset(spec), spec.eval_fraction, spec.seed);
    check_shape(ck.model, parts.first);
    return parts;
}

std::vector<SwitchSpec> switches_or_registry(const std::string& text, const ElasticModel<float>& model) {
    auto list = parse_switch_list(text);
    return list.empty() ? model.switches() : list;
}

std::vector<SwitchSpec> deployable(const std::vector<SwitchSpec>& specs) {
    std::vector<SwitchSpec> out;
    for (const auto& s : specs)
        if (s.total_width() <= 1.0 + 1e-9) out.push_back(s);
    return out;
}

// ---- plan files ----

json device_json(const DeviceProfile& d) {
    return {{"id", d.id},
            {"address", d.address},
            {"capacity_mflops", d.capacity_mflops},
            {"latency_ms", d.latency_ms},
            {"bandwidth_mbps", d.bandwidth_mbps},
            {"available", d.available}};
}

json plan_json(const DeploymentPlan& p, const std::vector<DeviceProfile>& devices, std::size_t batch) {
    json j;
    j["switch"] = p.spec.str();
    j["batch"] = batch;
    j["latency_ms"] = p.latency_ms;
    j["compute_ms"] = p.compute_ms;
    j["assignment"] = json::array();
    for (const auto& a : p.assignment)
        j["assignment"].push_back({{"position", a.position},
                                   {"device", a.device_id},
                                   {"mflops", a.mflops},
                                   {"compute_ms", a.compute_ms},
                                   {"comm_ms", a.comm_ms}});
    j["devices"] = json::array();
    for (const auto& d : devices) j["devices"].push_back(device_json(d));
    return j;
}

struct PlanFile {
    DeploymentPlan plan;
    std::vector<DeviceProfile> devices;
};

PlanFile read_plan(const std::string& path) {
    try {
        const json j = json::parse(read_text(path));
        PlanFile f;
        f.plan.spec = SwitchSpec::parse(j.at("switch").get<std::string>());
        f.plan.latency_ms = j.at("latency_ms").get<double>();
        f.plan.compute_ms = j.at("compute_ms").get<double>();
        for (const auto& a : j.at("assignment"))
            f.plan.assignment.push_back(Assignment{a.at("position").get<std::size_t>(), a.at("device").get<std::string>(),
                                                   a.at("mflops").get<double>(), a.at("compute_ms").get<double>(),
                                                   a.at("comm_ms").get<double>()});
        for (const auto& d : j.at("devices"))
            f.devices.push_back(DeviceProfile{d.at("id").get<std::string>(), d.at("address").get<std::string>(),
                                              d.at("capacity_mflops").get<double>(), d.at("latency_ms").get<double>(),
                                              d.at("bandwidth_mbps").get<double>(), d.at("available").get<bool>()});
        if (f.plan.assignment.size() != f.plan.spec.count())
            throw FormatError("switch " + f.plan.spec.str() + " has " + std::to_string(f.plan.spec.count()) +
                              " sub-models but the plan assigns " + std::to_string(f.plan.assignment.size()));
        return f;
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

void write_plan(const std::string& path, const json& j) {
    Output out(path);
    out.get() << j.dump(2) << '\n';
}

void print_plan(const DeploymentPlan& p) {
    std::cout << "switch " << p.spec.str() << "  modeled latency " << std::fixed << std::setprecision(3) << p.latency_ms
              << " ms (compute " << p.compute_ms << " ms)\n";
    for (const auto& a : p.assignment)
        std::cout << "  position " << a.position << " -> " << a.device_id << "  " << std::setprecision(4) << a.mflops
                  << " MFLOPs  compute " << std::setprecision(3) << a.compute_ms << " ms  comm " << a.comm_ms << " ms\n";
    std::cout << std::defaultfloat;
}

std::chrono::milliseconds ms(std::size_t v) { return std::chrono::milliseconds(v); }

// ---- subcommands ----

struct TrainArgs {
    std::string config, checkpoint, metrics, resume;
    std::size_t stop_after = 0;
    bool timing = false, quiet = false;
};

int cmd_train(const TrainArgs& a) {
    const auto kv = KeyValueConfig::parse(read_text(a.config));
    RunConfig rc = RunConfig::from(kv);
    const std::string ck_path = a.checkpoint.empty() ? rc.checkpoint : a.checkpoint;
    const std::string metrics_path = a.metrics.empty() ? rc.metrics : a.metrics;

    ElasticModel<float> model(rc.manifest());
    model.init(rc.trainer.seed);
    std::size_t first_epoch = 0;
    std::optional<OptimizerState<float>> resume_opt;
    std::size_t resume_iter = 0;
    if (!a.resume.empty()) {
        auto ck = load_checkpoint<float>(a.resume);
        if (ck.model.manifest().hash() != model.manifest().hash())
            throw ConfigError({"resume checkpoint " + a.resume + " was built for a different architecture"});
        model = std::move(ck.model);
        first_epoch = std::stoul(meta(ck, "epochs_done", "0"));
        resume_iter = std::stoul(meta(ck, "iteration", "0"));
        resume_opt = ck.optimizer;
    }

    const auto all = make_dataset(rc.dataset);
    auto [train, eval] = split(all, rc.dataset.eval_fraction, rc.dataset.seed);
    check_shape(model, train);

    Trainer<float> trainer(model, rc.trainer);
    if (resume_opt) trainer.optimizer().restore(resume_opt->buffers, resume_opt->seeded);
    trainer.set_iteration(resume_iter);

    std::ofstream metrics(metrics_path, first_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw Error("cannot write " + metrics_path);
    bool header = first_epoch == 0;
    auto on_epoch = [&](const std::vector<MetricsRow>& rows) {
        std::ostringstream os;
        write_metrics_csv(os, rows, a.timing);
        std::string text = os.str();
        if (!header) text.erase(0, text.find('\n') + 1);
        header = false;
        metrics << text << std::flush;
        if (!a.quiet)
            for (const auto& r : rows) {
                std::cout << "epoch " << r.epoch << "  " << std::left << std::setw(24) << r.switch_id << std::right
                          << " loss " << std::setprecision(5) << r.train_loss;
                if (r.eval_acc) std::cout << "  acc " << std::setprecision(4) << *r.eval_acc;
                std::cout << '\n';
            }
    };
    const std::size_t last = a.stop_after > 0 ? std::min(a.stop_after, rc.trainer.epochs) : rc.trainer.epochs;
    for (std::size_t e = first_epoch; e < last; ++e) on_epoch(trainer.run_epoch(train, e, eval.size() > 0 ? &eval : nullptr));

    std::vector<SwitchSpec> trained;
    for (const auto& s : rc.trainer.switches) trained.push_back(s);
    model.attach_stats(calibrate(model, trained, calibration_batches<float>(train, train.size(), rc.trainer.calib_batch)));

    std::map<std::string, std::string> md;
    md["config"] = kv.str();
    md["seed"] = std::to_string(rc.trainer.seed);
    md["iteration"] = std::to_string(trainer.iteration());
    md["epochs_done"] = std::to_string(std::max(first_epoch, last));
    md["mode"] = to_string(rc.trainer.mode);
    md["dataset"] = rc.dataset.str();
    OptimizerState<float> opt{trainer.optimizer().buffers(), trainer.optimizer().seeded()};
    save_checkpoint(ck_path, model, md, &opt);
    if (!a.quiet) {
        std::cout << "wrote " << ck_path << " and " << metrics_path << '\n';
        if (eval.size() > 0)
            for (const auto& s : trained)
                std::cout << "final " << std::left << std::setw(24) << s.str() << std::right << " acc "
                          << std::setprecision(4) << evaluate(model, s, eval) << '\n';
    }
    return 0;
}

struct CalibrateArgs {
    std::string checkpoint, switches, dataset, out, mode = "exact";
    std::size_t samples = 0, batch = 64;
    double momentum = 0.1;
    bool parallel = false;
};

int cmd_calibrate(const CalibrateArgs& a) {
    const auto specs = parse_switch_list(a.switches);
    if (specs.empty()) {
        std::cout << "no switches given; " << a.checkpoint << " left unchanged\n";
        return 0;
    }
    auto ck = load_checkpoint<float>(a.checkpoint);
    for (const auto& s : specs) ck.model.resolve(s);
    const auto [train, eval] = splits_for(ck, a.dataset);
    CalibrationOptions opt;
    if (a.mode == "exact") opt.mode = CalibrationMode::exact_mean;
    else if (a.mode == "moving") opt.mode = CalibrationMode::moving_average;
    else throw UsageError("unknown calibration mode " + a.mode + " (exact, moving)");
    opt.momentum = a.momentum;
    opt.parallel = a.parallel;
    const std::size_t n = a.samples == 0 ? train.size() : a.samples;
    ck.model.stats().merge(calibrate(ck.model, specs, calibration_batches<float>(train, n, a.batch), opt));
    for (const auto& s : specs) ck.model.register_switch(s);
    const std::string out = a.out.empty() ? a.checkpoint : a.out;
    save_checkpoint(out, ck);
    for (const auto& s : specs)
        std::cout << "calibrated " << s.str() << " on " << ck.model.stats().sample_count(s.str()) << " samples\n";
    std::cout << "wrote " << out << '\n';
    return 0;
}

struct EvalArgs {
    std::string checkpoint, switches, dataset, out = "-";
    std::size_t batch = 256;
};

int cmd_eval(const EvalArgs& a) {
    const auto ck = load_checkpoint<float>(a.checkpoint);
    const auto specs = switches_or_registry(a.switches, ck.model);
    if (specs.empty()) throw UsageError("checkpoint has no registered switches; pass --switches");
    const auto [train, eval] = splits_for(ck, a.dataset);
    if (eval.size() == 0) throw UsageError("the dataset's eval split is empty");
    Output out(a.out);
    auto& os = out.get();
    os << "switch,total_mflops,per_device_mflops,accuracy,status\n";
    bool missing = false;
    for (const auto& s : specs) {
        const auto cost = count_flops(ck.model, s);
        os << '"' << s.str() << "\"," << std::setprecision(6) << cost.total_mflops() << ',' << cost.per_device_mflops() << ',';
        try {
            os << std::setprecision(6) << evaluate(ck.model, s, eval, &ck.model.stats(), a.batch) << ",ok\n";
        } catch (const MissingStatsError& e) {
            os << ",missing-stats\n";
            std::cerr << "error: " << e.what() << '\n';
            missing = true;
        }
    }
    return missing ? 1 : 0;
}

struct FlopsArgs {
    std::string checkpoint, arch = "toy", switches, out = "-";
    std::size_t classes = 10;
    double wide = 1.2;
    bool summary = false;
};

int cmd_flops(const FlopsArgs& a) {
    std::optional<ElasticModel<float>> model;
    if (!a.checkpoint.empty()) model.emplace(load_checkpoint<float>(a.checkpoint).model);
    else model.emplace(arch::by_name(a.arch, a.classes, a.wide));
    auto specs = switches_or_registry(a.switches, *model);
    if (specs.empty()) specs = parse_switch_list("[1]x [0.5,0.5]x [0.5,0.25,0.25]x [4x0.25]x");
    std::vector<CostReport> reports;
    for (const auto& s : specs) reports.push_back(count_flops(*model, s));
    Output out(a.out);
    if (a.summary) {
        out.get() << "switch,total_mflops,per_device_mflops,params\n";
        for (const auto& r : reports)
            out.get() << '"' << r.switch_id << "\"," << std::setprecision(6) << r.total_mflops() << ','
                      << r.per_device_mflops() << ',' << r.params << '\n';
    } else {
        write_flops_csv(out.get(), reports);
    }
    return 0;
}

int cmd_export(const std::string& in, const std::string& out) {
    const auto ck = load_checkpoint<float>(in);
    const auto lean = ck.model.export_deployable();
    save_checkpoint(out, lean, ck.metadata);
    const auto before = std::filesystem::file_size(in), after = std::filesystem::file_size(out);
    std::cout << "wrote " << out << ": " << lean.weight_count() << " weights (was " << ck.model.weight_count() << "), "
              << after << " bytes (was " << before << ")\n";
    return 0;
}

std::atomic<WorkerServer*> g_worker{nullptr};

extern "C" void on_stop_signal(int) {
    if (auto* w = g_worker.load()) w->stop();
}

struct WorkerArgs {
    std::string listen = "127.0.0.1:7000", checkpoint, log_level = "info", name;
    std::size_t delay_ms = 0;
};

int cmd_worker(const WorkerArgs& a) {
    const auto level = parse_log_level(a.log_level);
    if (!level) throw UsageError("unknown log level " + a.log_level + " (error, warn, info, debug)");
    auto ck = load_checkpoint<float>(a.checkpoint);
    WorkerOptions opt;
    opt.name = a.name.empty() ? "worker" : a.name;
    opt.reply_delay = ms(a.delay_ms);
    opt.log = stderr_log(*level);
    WorkerServer server(std::move(ck.model), opt);
    auto listener = Listener::bind(a.listen);
    std::cout << "listening on " << listener.address() << std::endl;
    g_worker = &server;
    std::signal(SIGINT, on_stop_signal);
    std::signal(SIGTERM, on_stop_signal);
    server.serve(listener);
    g_worker = nullptr;
    return 0;
}

struct DeployArgs {
    std::string devices, checkpoint, switches, plan_out = "plan.json", remote_checkpoint;
    std::size_t batch = 1, timeout_ms = 5000;
    bool dry_run = false;
};

int cmd_deploy(const DeployArgs& a) {
    const auto ck = load_checkpoint<float>(a.checkpoint);
    const auto devices = load_devices(a.devices);
    const auto specs = deployable(switches_or_registry(a.switches, ck.model));
    const auto p = plan(ck.model, specs, devices, a.batch);
    print_plan(p);
    if (!a.dry_run) {
        Coordinator coord(devices, ck.model.params()[ck.model.head().bias].value, ms(a.timeout_ms));
        coord.connect();
        if (!a.remote_checkpoint.empty()) coord.load_checkpoint(a.remote_checkpoint);
        const auto sent = coord.apply(p);
        std::cout << "sent " << sent << " SET_SUBMODEL message(s), " << coord.wire().total() << " bytes on the wire\n";
    }
    write_plan(a.plan_out, plan_json(p, devices, a.batch));
    return 0;
}

struct InferArgs {
    std::string plan, checkpoint, dataset, out;
    std::size_t count = 32, batch = 8, timeout_ms = 5000;
    bool verify = false;
};

int cmd_infer(const InferArgs& a) {
    const auto ck = load_checkpoint<float>(a.checkpoint);
    const auto pf = read_plan(a.plan);
    const auto [train, eval] = splits_for(ck, a.dataset);
    const Dataset& data = eval.size() > 0 ? eval : train;
    Coordinator coord(pf.devices, ck.model.params()[ck.model.head().bias].value, ms(a.timeout_ms));
    coord.connect();
    coord.adopt(pf.plan);

    const std::size_t n = std::min(a.count, data.size());
    std::size_t correct = 0;
    double worst = 0, critical = 0, total = 0;
    std::optional<Output> logits_out;
    if (!a.out.empty()) logits_out.emplace(a.out);
    for (std::size_t s = 0; s < n; s += a.batch) {
        std::vector<std::size_t> idx(std::min(a.batch, n - s));
        std::iota(idx.begin(), idx.end(), s);
        const auto x = data.gather(idx);
        const auto r = coord.infer(x);
        critical = std::max(critical, r.timing.critical_path_ms);
        total += r.timing.total_ms;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < r.logits.dim(1); ++c)
                if (r.logits.at(b, c) > r.logits.at(b, best)) best = c;
            if (int(best) == data.labels[idx[b]]) ++correct;
            if (logits_out) {
                auto& os = logits_out->get();
                os << idx[b];
                for (std::size_t c = 0; c < r.logits.dim(1); ++c) os << ',' << std::setprecision(9) << r.logits.at(b, c);
                os << '\n';
            }
        }
        if (a.verify) {
            const auto local = infer_switch(ck.model, pf.plan.spec, x);
            for (std::size_t k = 0; k < local.size(); ++k)
                worst = std::max(worst, double(std::abs(local[k] - r.logits[k])) / std::max(1.0, double(std::abs(local[k]))));
        }
    }
    std::cout << "switch " << pf.plan.spec.str() << "  samples " << n << "  accuracy " << std::setprecision(4)
              << double(correct) / double(std::max<std::size_t>(1, n)) << "  slowest round trip " << std::setprecision(3)
              << critical << " ms  total " << total << " ms\n";
    if (a.verify) std::cout << "max relative difference to in-process fusion " << std::setprecision(3) << worst << '\n';
    return 0;
}

struct ReconfigArgs {
    std::string plan, devices, checkpoint, switches, plan_out;
    std::size_t batch = 1, timeout_ms = 5000;
};

int cmd_reconfig(const ReconfigArgs& a) {
    const auto ck = load_checkpoint<float>(a.checkpoint);
    const auto old = read_plan(a.plan);
    const auto devices = load_devices(a.devices);
    const auto specs = deployable(switches_or_registry(a.switches, ck.model));
    const auto next = reconfigure(ck.model, old.plan, specs, devices, a.batch);

    Coordinator coord(devices, ck.model.params()[ck.model.head().bias].value, ms(a.timeout_ms));
    DeploymentPlan known = old.plan;
    std::erase_if(known.assignment, [&](const Assignment& x) {
        return std::none_of(devices.begin(), devices.end(), [&](const DeviceProfile& d) { return d.id == x.device_id; });
    });
    coord.connect();
    coord.adopt(known);
    coord.wire().reset();
    const auto sent = coord.apply(next);
    const auto& w = coord.wire();
    std::cout << "switch " << old.plan.spec.str() << " -> " << next.spec.str() << '\n';
    print_plan(next);
    const auto sent_bytes = w.sent();
    std::uint64_t out_bytes = 0;
    for (const auto& [t, b] : sent_bytes) out_bytes += b;
    std::cout << "SET_SUBMODEL messages " << sent << ", bytes sent " << out_bytes << ", bytes in both directions " << w.total()
              << ", weight bytes moved 0\n";
    write_plan(a.plan_out.empty() ? a.plan : a.plan_out, plan_json(next, devices, a.batch));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Width-elastic CNN training, calibration and distributed inference"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train all switches from a key = value config file");
    train->add_option("config", ta.config, "Config file")->required();
    train->add_option("--checkpoint", ta.checkpoint, "Output checkpoint (overrides the config)");
    train->add_option("--metrics", ta.metrics, "Metrics CSV (overrides the config)");
    train->add_option("--resume", ta.resume, "Continue from a checkpoint written by an earlier run");
    train->add_option("--stop-after", ta.stop_after, "Stop after this many epochs of the schedule");
    train->add_flag("--timing", ta.timing, "Add a wall_ms column to the metrics CSV");
    train->add_flag("--quiet", ta.quiet, "No progress output");

    CalibrateArgs ca;
    auto* cal = app.add_subcommand("calibrate", "Compute normalization statistics for switches");
    cal->add_option("checkpoint", ca.checkpoint, "Checkpoint to update")->required();
    cal->add_option("switches", ca.switches, "Switches, e.g. \"[0.5,0.5]x [4x0.25]x\"")->required();
    cal->add_option("--dataset", ca.dataset, "Dataset spec (default: the one recorded in the checkpoint)");
    cal->add_option("--samples", ca.samples, "Calibration samples from the training split (default: all)");
    cal->add_option("--batch", ca.batch, "Calibration batch size");
    cal->add_option("--mode", ca.mode, "exact or moving");
    cal->add_option("--momentum", ca.momentum, "Moving-average momentum");
    cal->add_flag("--parallel", ca.parallel, "One thread per switch");
    cal->add_option("-o,--out", ca.out, "Write here instead of updating in place");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Accuracy and cost sweep over switches");
    ev->add_option("checkpoint", ea.checkpoint, "Checkpoint")->required();
    ev->add_option("--switches", ea.switches, "Switches (default: registered ones)");
    ev->add_option("--dataset", ea.dataset, "Dataset spec (default: the one recorded in the checkpoint)");
    ev->add_option("--batch", ea.batch, "Evaluation batch size");
    ev->add_option("-o,--out", ea.out, "CSV output, - for stdout");

    FlopsArgs fa;
    auto* fl = app.add_subcommand("flops", "Per-layer and per-sub-model multiply-accumulate counts");
    fl->add_option("--checkpoint", fa.checkpoint, "Take the architecture and switches from a checkpoint");
    fl->add_option("--arch", fa.arch, "toy, mobilenet-toy or resnet-toy");
    fl->add_option("--classes", fa.classes, "Number of classes");
    fl->add_option("--wide", fa.wide, "Stored width of the widest switch");
    fl->add_option("--switches", fa.switches, "Switches to count");
    fl->add_flag("--summary", fa.summary, "One row per switch");
    fl->add_option("-o,--out", fa.out, "CSV output, - for stdout");

    std::string export_in, export_out;
    auto* ex = app.add_subcommand("export", "Drop channels beyond width 1.0 for deployment");
    ex->add_option("checkpoint", export_in, "Input checkpoint")->required();
    ex->add_option("out", export_out, "Output checkpoint")->required();

    WorkerArgs wa;
    auto* wk = app.add_subcommand("worker", "Serve one sub-model at a time over TCP");
    wk->add_option("--listen", wa.listen, "host:port, port 0 picks a free one");
    wk->add_option("--checkpoint", wa.checkpoint, "Checkpoint to serve")->required();
    wk->add_option("--log-level", wa.log_level, "error, warn, info or debug");
    wk->add_option("--name", wa.name, "Name reported in HELLO");
    wk->add_option("--delay-ms", wa.delay_ms, "Artificial delay before each reply");

    DeployArgs da;
    auto* dp = app.add_subcommand("deploy", "Plan a deployment and configure the workers");
    dp->add_option("devices", da.devices, "Device file")->required();
    dp->add_option("checkpoint", da.checkpoint, "Checkpoint (the switch registry supplies candidates)")->required();
    dp->add_option("--switches", da.switches, "Candidate switches (default: registered ones)");
    dp->add_option("--batch", da.batch, "Batch size the plan is costed for");
    dp->add_option("--plan-out", da.plan_out, "Where to write the plan JSON");
    dp->add_option("--remote-checkpoint", da.remote_checkpoint, "Make every worker load this path first");
    dp->add_option("--timeout-ms", da.timeout_ms, "Per-request timeout");
    dp->add_flag("--dry-run", da.dry_run, "Plan only, contact no worker");

    InferArgs ia;
    auto* inf = app.add_subcommand("infer", "Run distributed inference with a deployed plan");
    inf->add_option("plan", ia.plan, "Plan JSON written by deploy or reconfig")->required();
    inf->add_option("checkpoint", ia.checkpoint, "Checkpoint (head bias and dataset)")->required();
    inf->add_option("--dataset", ia.dataset, "Dataset spec (default: the one recorded in the checkpoint)");
    inf->add_option("--count", ia.count, "Samples to infer");
    inf->add_option("--batch", ia.batch, "Samples per request");
    inf->add_option("--timeout-ms", ia.timeout_ms, "Per-request timeout");
    inf->add_option("--logits", ia.out, "Write fused logits as CSV");
    inf->add_flag("--verify", ia.verify, "Compare with in-process fusion");

    ReconfigArgs ra;
    auto* rc = app.add_subcommand("reconfig", "Re-plan for a changed device file and update only what moved");
    rc->add_option("plan", ra.plan, "Current plan JSON")->required();
    rc->add_option("devices", ra.devices, "New device file")->required();
    rc->add_option("checkpoint", ra.checkpoint, "Checkpoint")->required();
    rc->add_option("--switches", ra.switches, "Candidate switches (default: registered ones)");
    rc->add_option("--batch", ra.batch, "Batch size the plan is costed for");
    rc->add_option("--plan-out", ra.plan_out, "Where to write the new plan (default: overwrite)");
    rc->add_option("--timeout-ms", ra.timeout_ms, "Per-request timeout");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(ta);
        if (cal->parsed()) return cmd_calibrate(ca);
        if (ev->parsed()) return cmd_eval(ea);
        if (fl->parsed()) return cmd_flops(fa);
        if (ex->parsed()) return cmd_export(export_in, export_out);
        if (wk->parsed()) return cmd_worker(wa);
        if (dp->parsed()) return cmd_deploy(da);
        if (inf->parsed()) return cmd_infer(ia);
        if (rc->parsed()) return cmd_reconfig(ra);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error:\n";
        for (const auto& p : e.problems()) std::cerr << "  " << p << '\n';
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const SwitchError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
