#include "crowdsplat/refiner.hpp"

#include "crowdsplat/fs_util.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

namespace crowdsplat {

ImageBuffer IdentityRefiner::refine(const ImageBuffer& rgb, const ImageBuffer&) const { return rgb; }

namespace {

std::vector<double> blur_kernel(double sigma) {
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * r + 1);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + r];
    }
    for (double& v : k) v /= sum;
    return k;
}

// sum_i k[i] * (src(p + i) - src(p)) along one axis with replicated edges.
ImageBuffer axis_delta(const ImageBuffer& src, const std::vector<double>& k, bool horizontal) {
    const int r = static_cast<int>(k.size()) / 2;
    ImageBuffer out(src.width(), src.height(), src.channels(), src.role());
    for (int y = 0; y < src.height(); ++y)
        for (int x = 0; x < src.width(); ++x)
            for (int c = 0; c < src.channels(); ++c) {
                const double center = src.at(x, y, c);
                double acc = 0.0;
                for (int i = -r; i <= r; ++i) {
                    const int xx = horizontal ? std::clamp(x + i, 0, src.width() - 1) : x;
                    const int yy = horizontal ? y : std::clamp(y + i, 0, src.height() - 1);
                    acc += k[i + r] * (src.at(xx, yy, c) - center);
                }
                out.at(x, y, c) = acc;
            }
    return out;
}

// Plain separable filter along one axis (replicated edges).
ImageBuffer axis_blur(const ImageBuffer& src, const std::vector<double>& k, bool horizontal) {
    const int r = static_cast<int>(k.size()) / 2;
    ImageBuffer out(src.width(), src.height(), src.channels(), src.role());
    for (int y = 0; y < src.height(); ++y)
        for (int x = 0; x < src.width(); ++x)
            for (int c = 0; c < src.channels(); ++c) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i) {
                    const int xx = horizontal ? std::clamp(x + i, 0, src.width() - 1) : x;
                    const int yy = horizontal ? y : std::clamp(y + i, 0, src.height() - 1);
                    acc += k[i + r] * src.at(xx, yy, c);
                }
                out.at(x, y, c) = acc;
            }
    return out;
}

}  // namespace

// (Bv Bh - I) x = Bv (Bh - I) x + (Bv - I) x
ImageBuffer gaussian_blur_delta(const ImageBuffer& image, double sigma) {
    if (!(sigma > 0.0)) throw ValidationError("blur sigma must be > 0");
    const auto k = blur_kernel(sigma);
    const ImageBuffer dh = axis_delta(image, k, true);
    ImageBuffer out = axis_blur(dh, k, false);
    const ImageBuffer dv = axis_delta(image, k, false);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += dv.data()[i];
    return out;
}

ImageBuffer gaussian_blur(const ImageBuffer& image, double sigma) {
    ImageBuffer out = gaussian_blur_delta(image, sigma);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += image.data()[i];
    return out;
}

UnsharpRefiner::UnsharpRefiner(double amount, double radius) : amount_(amount), radius_(radius) {
    if (!(amount >= 0.0) || !std::isfinite(amount)) throw ValidationError("unsharp amount must be finite and >= 0");
    if (!(radius > 0.0) || !std::isfinite(radius)) throw ValidationError("unsharp radius must be finite and > 0");
}

ImageBuffer UnsharpRefiner::refine(const ImageBuffer& rgb, const ImageBuffer&) const {
    if (amount_ == 0.0) return rgb;
    const ImageBuffer delta = gaussian_blur_delta(rgb, radius_);
    ImageBuffer out = rgb;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = std::clamp(rgb.data()[i] - amount_ * delta.data()[i], 0.0, 1.0);
    return out;
}

ExternalRefiner::ExternalRefiner(std::string command, double timeout_seconds)
    : command_(std::move(command)), timeout_seconds_(timeout_seconds) {
    if (command_.empty()) throw ValidationError("external refiner command is empty");
    if (!(timeout_seconds > 0.0)) throw ValidationError("external refiner timeout must be > 0");
}

namespace {

struct TempDir {
    std::filesystem::path path;

    TempDir() {
        std::string templ = (std::filesystem::temp_directory_path() / "crowdsplat-refine-XXXXXX").string();
        if (!mkdtemp(templ.data())) throw Error("cannot create temp directory for external refiner");
        path = templ;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

}  // namespace

ImageBuffer ExternalRefiner::refine(const ImageBuffer& rgb, const ImageBuffer& normal) const {
    TempDir dir;
    const auto rgb_path = dir.path / "rgb.png";
    const auto normal_path = dir.path / "normal.png";
    const auto out_path = dir.path / "out.png";
    const auto log_path = dir.path / "transcript.txt";
    write_png(rgb_path, rgb, 16);
    write_png(normal_path, normal, 16);

    const std::string script = command_ + " \"$1\" \"$2\" \"$3\"";
    const pid_t pid = fork();
    if (pid < 0) throw Error("fork failed for external refiner");
    if (pid == 0) {
        setpgid(0, 0);
        const int fd = open(log_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd >= 0) {
            dup2(fd, STDOUT_FILENO);
            dup2(fd, STDERR_FILENO);
            close(fd);
        }
        execl("/bin/sh", "sh", "-c", script.c_str(), "sh", rgb_path.c_str(), normal_path.c_str(), out_path.c_str(),
              static_cast<char*>(nullptr));
        _exit(127);
    }
    setpgid(pid, pid);

    auto transcript = [&] {
        std::string text;
        try {
            text = read_text_file(log_path);
        } catch (const std::exception&) {
        }
        return "command: " + script + " (rgb.png normal.png out.png)\noutput:\n" + text;
    };

    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds_);
    int status = 0;
    for (;;) {
        const pid_t r = waitpid(pid, &status, WNOHANG);
        if (r == pid) break;
        if (r < 0) throw Error("waitpid failed for external refiner");
        if (std::chrono::steady_clock::now() > deadline) {
            kill(-pid, SIGKILL);
            waitpid(pid, &status, 0);
            throw Error("external refiner timed out after " + std::to_string(timeout_seconds_) + " s\n" + transcript());
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        throw Error("external refiner exited with status " + std::to_string(code) + "\n" + transcript());
    }
    if (!std::filesystem::exists(out_path))
        throw Error("external refiner did not write its output image\n" + transcript());
    ImageBuffer out = read_png(out_path, ImageRole::rgb);
    if (out.width() != rgb.width() || out.height() != rgb.height() || out.channels() != rgb.channels())
        throw Error("external refiner output is " + std::to_string(out.width()) + "x" + std::to_string(out.height())
                    + "x" + std::to_string(out.channels()) + ", expected " + std::to_string(rgb.width()) + "x"
                    + std::to_string(rgb.height()) + "x" + std::to_string(rgb.channels()) + "\n" + transcript());
    return out;
}

std::unique_ptr<Refiner> make_refiner(const nlohmann::json& spec) {
    try {
        const std::string type = spec.at("type").get<std::string>();
        if (type == "identity") return std::make_unique<IdentityRefiner>();
        if (type == "unsharp")
            return std::make_unique<UnsharpRefiner>(spec.value("amount", 1.0), spec.value("radius", 1.0));
        if (type == "external")
            return std::make_unique<ExternalRefiner>(spec.at("command").get<std::string>(),
                                                     spec.value("timeout_seconds", 300.0));
        throw ValidationError("unknown refiner type '" + type + "'");
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed refiner spec: ") + e.what());
    }
}

}  // namespace crowdsplat
