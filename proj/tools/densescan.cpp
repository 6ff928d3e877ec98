// densescan command-line tool.
//
// Image sizes are written WxH on the command line (width first) and stored
// as Size2{h, w} internally.

#include "densescan/densescan.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace densescan;

constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;

Size2 parse_size(const std::string& text) {
    const auto sep = text.find_first_of("xX");
    if (sep == std::string::npos || sep == 0 || sep + 1 == text.size())
        throw Error(ErrorCode::FormatError, "size '" + text + "' is not of the form WxH");
    std::size_t w = 0;
    std::size_t h = 0;
    try {
        std::size_t used = 0;
        w = std::stoul(text.substr(0, sep), &used);
        if (used != sep) throw std::invalid_argument("w");
        h = std::stoul(text.substr(sep + 1), &used);
        if (used != text.size() - sep - 1) throw std::invalid_argument("h");
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::FormatError, "size '" + text + "' is not of the form WxH");
    }
    if (w == 0 || h == 0) throw Error(ErrorCode::FormatError, "size '" + text + "' has a zero extent");
    return {h, w};
}

std::vector<Size2> parse_sizes(const std::string& text) {
    std::vector<Size2> sizes;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) sizes.push_back(parse_size(item));
    if (sizes.empty()) throw Error(ErrorCode::FormatError, "no sizes given");
    return sizes;
}

nlohmann::json shapes_json(const std::vector<Shape>& shapes) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& s : shapes) out.push_back(s.dims());
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
    out << text;
}

nlohmann::json describe(const NetworkSpec& spec, const std::optional<Size2>& image) {
    nlohmann::json doc;
    doc["network"] = network_to_json(spec);
    doc["shape_trace"] = shapes_json(infer_shapes(spec));
    nlohmann::json ledger = nlohmann::json::array();
    for (const auto& l : decompose_strided_convs(spec).layers)
        if (const auto* p = std::get_if<PoolLayer>(&l)) ledger.push_back({p->stride.h, p->stride.w});
    doc["m_ledger"] = ledger;
    doc["flops"] = {{"per_patch", count_flops(spec, PerPatch{})}};
    if (image) {
        const DensePlan plan = compile(spec, *image);
        doc["plan"] = describe_plan(plan);
        doc["m_sizes"] = plan.m_sizes();
        doc["output_shape"] = plan.output_shape().dims();
        doc["peak_bytes"] = estimate_memory(plan);
        doc["flops"]["dense"] = count_flops(plan);
        doc["flops"]["all_patches"] = count_flops(spec, PerPatch{}) * image->area();
        doc["flops"]["redundancy_ratio"] = redundancy_ratio(spec, *image);
    }
    return doc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dense per-pixel CNN features via multipooling and unwarping"};
    app.require_subcommand(1);

    std::string net_path;
    std::string image_arg;
    std::string out_path;
    std::string weights_path;
    std::string image_file;
    std::string mode = "dense";
    std::string sizes_arg;
    std::string csv_path;
    std::uint64_t seed = 0;
    float tol = 1e-5f;
    std::size_t trials = 1;
    std::size_t repeats = 5;
    std::size_t warmup = 1;
    std::size_t channels = 0;
    std::string compare_a;
    std::string compare_b;

    auto* describe_cmd = app.add_subcommand("describe", "Print shape trace, M ledger, FLOPs and memory as JSON");
    describe_cmd->add_option("--net", net_path, "Network description JSON")->required();
    describe_cmd->add_option("--image", image_arg, "Image size WxH");

    auto* convert_cmd = app.add_subcommand("convert", "Compile the image network and write its plan as JSON");
    convert_cmd->add_option("--net", net_path, "Network description JSON")->required();
    convert_cmd->add_option("--image", image_arg, "Image size WxH")->required();
    convert_cmd->add_option("--out", out_path, "Output plan JSON")->required();

    auto* run_cmd = app.add_subcommand("run", "Compute the (k,H,W) feature map of a .dtns image");
    run_cmd->add_option("--net", net_path, "Network description JSON")->required();
    run_cmd->add_option("--weights", weights_path, "Weight file")->required();
    run_cmd->add_option("--image-file", image_file, "(c,H,W) .dtns image")->required();
    run_cmd->add_option("--mode", mode, "dense or patch")->check(CLI::IsMember({"dense", "patch"}));
    run_cmd->add_option("--out", out_path, "Output .dtns")->required();

    auto* verify_cmd = app.add_subcommand("verify", "Compare the image network against per-patch execution");
    verify_cmd->add_option("--net", net_path, "Network description JSON")->required();
    verify_cmd->add_option("--image", image_arg, "Image size WxH")->required();
    verify_cmd->add_option("--seed", seed, "Seed for weights and images")->required();
    verify_cmd->add_option("--tol", tol, "Absolute tolerance");
    verify_cmd->add_option("--trials", trials, "Number of random trials");

    auto* bench_cmd = app.add_subcommand("bench", "Time image network vs batched per-patch execution");
    bench_cmd->add_option("--net", net_path, "Network description JSON")->required();
    bench_cmd->add_option("--sizes", sizes_arg, "Comma-separated WxH list")->required();
    bench_cmd->add_option("--repeats", repeats, "Timed repeats per mode");
    bench_cmd->add_option("--warmup", warmup, "Untimed warmup runs per mode");
    bench_cmd->add_option("--seed", seed, "Seed for weights and images")->required();
    bench_cmd->add_option("--tol", tol, "Correctness gate tolerance");
    bench_cmd->add_option("--csv", csv_path, "Output CSV")->required();

    auto* weights_cmd = app.add_subcommand("init-weights", "Write seeded random weights for a network");
    weights_cmd->add_option("--net", net_path, "Network description JSON")->required();
    weights_cmd->add_option("--seed", seed, "Seed")->required();
    weights_cmd->add_option("--out", out_path, "Output weight file")->required();

    auto* image_cmd = app.add_subcommand("random-image", "Write a seeded uniform [-1,1) (c,H,W) .dtns image");
    image_cmd->add_option("--image", image_arg, "Image size WxH")->required();
    image_cmd->add_option("--channels", channels, "Channel count")->required();
    image_cmd->add_option("--seed", seed, "Seed")->required();
    image_cmd->add_option("--out", out_path, "Output .dtns")->required();

    auto* compare_cmd = app.add_subcommand("compare", "Compare two (k,H,W) .dtns tensors");
    compare_cmd->add_option("first", compare_a, "First tensor")->required();
    compare_cmd->add_option("second", compare_b, "Second tensor")->required();
    compare_cmd->add_option("--tol", tol, "Absolute tolerance");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*describe_cmd) {
            std::optional<Size2> image;
            if (!image_arg.empty()) image = parse_size(image_arg);
            std::cout << describe(load_network(net_path), image).dump(2) << "\n";
        } else if (*convert_cmd) {
            const DensePlan plan = compile(load_network(net_path), parse_size(image_arg));
            write_text(out_path, describe_plan(plan).dump(2) + "\n");
        } else if (*run_cmd) {
            const NetworkSpec spec = load_network(net_path);
            const WeightSet weights = load_weights(weights_path);
            check_weights(spec, weights);
            Tensor image = load_dtns(image_file);
            if (image.rank() != 3)
                throw Error(ErrorCode::FormatError, "image file must hold a (c,H,W) tensor");
            const Size2 size{image.dim(1), image.dim(2)};
            Tensor out = mode == "dense" ? execute(compile(spec, size), weights, std::move(image))
                                         : dense_by_patches(spec, weights, image);
            save_dtns(out_path, out);
        } else if (*verify_cmd) {
            const NetworkSpec spec = load_network(net_path);
            const Size2 size = parse_size(image_arg);
            const DensePlan plan = compile(spec, size);
            SplitMix64 root(seed);
            bool all_pass = true;
            for (std::size_t t = 0; t < trials; ++t) {
                const WeightSet weights = init_weights(spec, root.next());
                const Tensor image = random_tensor(Shape{spec.in_channels, size.h, size.w}, root.next());
                const DiffReport report = compare(execute(plan, weights, image),
                                                  dense_by_patches(spec, weights, image), tol);
                all_pass = all_pass && report.pass;
                std::cout << "trial " << t << ": " << format_report(report) << "\n";
            }
            std::cout << (all_pass ? "verify: all trials passed" : "verify: FAILED") << "\n";
            return all_pass ? 0 : kExitVerifyFailed;
        } else if (*bench_cmd) {
            const NetworkSpec spec = load_network(net_path);
            const WeightSet weights = init_weights(spec, seed);
            BenchOptions options;
            options.repeats = repeats;
            options.warmup = warmup;
            options.seed = seed;
            options.tolerance = tol;
            std::vector<BenchRow> rows;
            try {
                rows = time_modes(spec, weights, parse_sizes(sizes_arg), options);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::VerificationFailed) throw;
                std::cerr << e.what() << "\n";
                return kExitVerifyFailed;
            }
            emit_csv(rows, csv_path);
            std::cout << format_csv(rows);
        } else if (*weights_cmd) {
            save_weights(out_path, init_weights(load_network(net_path), seed));
        } else if (*image_cmd) {
            const Size2 size = parse_size(image_arg);
            if (channels == 0) throw Error(ErrorCode::FormatError, "--channels must be >= 1");
            save_dtns(out_path, random_tensor(Shape{channels, size.h, size.w}, seed));
        } else if (*compare_cmd) {
            const DiffReport report = compare(load_dtns(compare_a), load_dtns(compare_b), tol);
            std::cout << format_report(report) << "\n";
            return report.pass ? 0 : kExitVerifyFailed;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return 0;
}
