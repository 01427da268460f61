#include <cstdio>
#include <cstring>
#include <iostream>
#include <string>

#include "mopeft/commands.hpp"

namespace {

constexpr const char* kUsage = R"(usage: mopeft <command> [flags]

commands
  train       train the configured mode and write run artifacts
  eval        evaluate a saved checkpoint on the configured val split
  gradcheck   compare analytic gradients against finite differences
  sweep       run train once per value of a peft axis and summarize
  report      print gate-selection table and parameter budget for a run

flags
  --config PATH     line-based `key = value` config file with [section] headers
  --set KEY=VALUE   override one config key (repeatable, applied in order)
  --out DIR         run directory (overrides out_dir from file/defaults)
  --force           allow reusing a run directory that already holds a run
  --parallel N      sweep only: run up to N sweep points concurrently
  --axis KEY        sweep only: peft.rank | peft.prefix_len | peft.d_mid
  --values A,B,...  sweep only: comma-separated values for the axis

examples
  mopeft train --set peft.mode=mopeft --set data.domain=rings --out runs/rings
  mopeft eval --out runs/rings --set data.sigma=0.1
  mopeft gradcheck --set peft.mode=lora --set model.dim=16 --set model.layers=2
  mopeft sweep --set peft.mode=vpt_deep --axis peft.prefix_len --values 5,10,20,25
  mopeft report --out runs/rings
)";

int usage_error(const std::string& message) {
    std::fprintf(stderr, "mopeft: %s\n\n%s", message.c_str(), kUsage);
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) return usage_error("missing command");
    std::string command = argv[1];
    if (command == "-h" || command == "--help" || command == "help") {
        std::fputs(kUsage, stdout);
        return 0;
    }
    if (command != "train" && command != "eval" && command != "gradcheck" &&
        command != "sweep" && command != "report")
        return usage_error("unknown command '" + command + "'");

    mopeft::CliOptions opts;
    for (int i = 2; i < argc; ++i) {
        std::string flag = argv[i];
        auto value = [&]() -> std::string {
            if (i + 1 >= argc) {
                std::fprintf(stderr, "mopeft: flag %s needs a value\n", flag.c_str());
                std::exit(2);
            }
            return argv[++i];
        };
        if (flag == "--config") {
            opts.config_path = value();
        } else if (flag == "--set") {
            opts.overrides.push_back(value());
        } else if (flag == "--out") {
            opts.out_dir = value();
        } else if (flag == "--force") {
            opts.force = true;
        } else if (flag == "--parallel") {
            try {
                opts.parallel = std::stoi(value());
            } catch (const std::exception&) {
                return usage_error("--parallel needs an integer");
            }
            if (opts.parallel < 1) return usage_error("--parallel must be >= 1");
        } else if (flag == "--axis") {
            opts.axis = value();
        } else if (flag == "--values") {
            std::string list = value();
            size_t pos = 0;
            while (pos <= list.size()) {
                size_t comma = list.find(',', pos);
                if (comma == std::string::npos) comma = list.size();
                if (comma > pos) opts.values.push_back(list.substr(pos, comma - pos));
                pos = comma + 1;
            }
        } else if (flag == "-h" || flag == "--help") {
            std::fputs(kUsage, stdout);
            return 0;
        } else {
            return usage_error("unknown flag '" + flag + "'");
        }
    }

    try {
        if (command == "train") return mopeft::cmd_train(opts, std::cout);
        if (command == "eval") return mopeft::cmd_eval(opts, std::cout);
        if (command == "gradcheck") return mopeft::cmd_gradcheck(opts, std::cout);
        if (command == "sweep") return mopeft::cmd_sweep(opts, std::cout);
        return mopeft::cmd_report(opts, std::cout);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "mopeft %s: error: %s\n", command.c_str(), e.what());
        return 1;
    }
}
