#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ensf/error.hpp"
#include "ensf/format.hpp"
#include "ensf/models.hpp"

namespace ensf {

/// Forecast model living in a child process, spoken to over its standard streams.
///
/// Protocol (one line-oriented request in flight at a time):
///   child -> `MODEL <d> <T> <batch>` once at startup
///   parent -> `PREDICT <M>` then M*T lines of d numbers (member-major, oldest first)
///   child -> M lines of d numbers
/// Without batch support each request carries a single member.
class ExternalModel final : public ForwardModel {
 public:
  using Clock = std::chrono::steady_clock;

  explicit ExternalModel(std::string command,
                         std::chrono::milliseconds timeout = std::chrono::seconds(10))
      : command_(std::move(command)), timeout_(timeout) {
    launch();
    try {
      handshake();
    } catch (...) {
      shutdown();
      throw;
    }
  }

  ExternalModel(const ExternalModel&) = delete;
  ExternalModel& operator=(const ExternalModel&) = delete;

  ~ExternalModel() override { shutdown(); }

  Eigen::Index dimension() const override { return dimension_; }
  int window_length() const override { return window_length_; }
  std::string name() const override { return "external:" + command_; }
  bool supports_batch() const noexcept { return batch_; }

  Vector propagate(const Window& window, std::int64_t, const Vector& noise) override {
    check_window(window, noise);
    check_length(window);
    const Matrix reply = request(std::span<const Window>(&window, 1));
    return reply.row(0).transpose() + noise;
  }

  Matrix propagate_all(std::span<const Window> windows, std::int64_t time,
                       const Matrix& noise) override {
    if (!batch_) return ForwardModel::propagate_all(windows, time, noise);
    for (const Window& w : windows) check_length(w);
    if (noise.rows() != static_cast<Eigen::Index>(windows.size()) || noise.cols() != dimension_) {
      throw ConfigError("external model noise has the wrong shape");
    }
    return request(windows) + noise;
  }

 private:
  void check_length(const Window& w) const {
    if (w.length() != window_length_ || w.dimension() != dimension_) {
      throw ConfigError("external model expects windows of " + std::to_string(window_length_) +
                        " x " + std::to_string(dimension_));
    }
  }

  void launch() {
    ::signal(SIGPIPE, SIG_IGN);
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) {
      throw ExternalModelError("cannot create pipes: " + std::string(std::strerror(errno)));
    }
    pid_ = ::fork();
    if (pid_ < 0) throw ExternalModelError("fork failed: " + std::string(std::strerror(errno)));
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
    ::fcntl(write_fd_, F_SETFD, FD_CLOEXEC);
    ::fcntl(read_fd_, F_SETFD, FD_CLOEXEC);
  }

  void handshake() {
    const std::string line = read_line(Clock::now() + timeout_, "handshake");
    std::istringstream in(line);
    std::string tag;
    long long d = 0;
    long long t = 0;
    int batch = -1;
    if (!(in >> tag >> d >> t >> batch) || tag != "MODEL" || d < 1 || t < 1 ||
        (batch != 0 && batch != 1)) {
      throw ExternalModelError("malformed handshake from external model: '" + excerpt(line) +
                               "'");
    }
    std::string extra;
    if (in >> extra) {
      throw ExternalModelError("malformed handshake from external model: '" + excerpt(line) +
                               "'");
    }
    dimension_ = static_cast<Eigen::Index>(d);
    window_length_ = static_cast<int>(t);
    batch_ = batch == 1;
  }

  Matrix request(std::span<const Window> windows) {
    std::string payload = "PREDICT " + std::to_string(windows.size()) + "\n";
    for (const Window& w : windows) {
      for (Eigen::Index r = 0; r < w.rows().rows(); ++r) {
        for (Eigen::Index c = 0; c < w.rows().cols(); ++c) {
          if (c > 0) payload += ' ';
          payload += format_double(w.rows()(r, c));
        }
        payload += '\n';
      }
    }
    write_all(payload);

    const auto deadline = Clock::now() + timeout_;
    Matrix out(static_cast<Eigen::Index>(windows.size()), dimension_);
    for (Eigen::Index m = 0; m < out.rows(); ++m) {
      const std::string line = read_line(deadline, "prediction");
      std::istringstream in(line);
      std::string token;
      Eigen::Index count = 0;
      std::vector<double> values;
      while (in >> token) {
        const auto v = parse_double(token);
        if (!v) {
          throw ExternalModelError("external model replied with a non-numeric token '" +
                                   excerpt(token) + "' in '" + excerpt(line) + "'");
        }
        values.push_back(*v);
        ++count;
      }
      if (count != dimension_) {
        throw ExternalModelError("external model replied with " + std::to_string(count) +
                                 " values, expected " + std::to_string(dimension_) + ": '" +
                                 excerpt(line) + "'");
      }
      for (Eigen::Index i = 0; i < dimension_; ++i)
        out(m, i) = values[static_cast<std::size_t>(i)];
    }
    if (!out.allFinite()) throw ExternalModelError("external model replied with non-finite values");
    return out;
  }

  void write_all(const std::string& data) {
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::write(write_fd_, data.data() + off, data.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ExternalModelError("cannot write to external model: " +
                                 std::string(std::strerror(errno)));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::string read_line(Clock::time_point deadline, const char* what) {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      const auto left =
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
      if (left.count() <= 0) {
        throw ExternalModelError("external model timed out after " +
                                 std::to_string(timeout_.count()) + " ms waiting for " + what +
                                 "; partial reply: '" + excerpt(buffer_) + "'");
      }
      pollfd pfd{read_fd_, POLLIN, 0};
      const int ready = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (ready < 0) {
        if (errno == EINTR) continue;
        throw ExternalModelError("poll failed: " + std::string(std::strerror(errno)));
      }
      if (ready == 0) continue;
      char chunk[4096];
      const ssize_t n = ::read(read_fd_, chunk, sizeof(chunk));
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ExternalModelError("cannot read from external model: " +
                                 std::string(std::strerror(errno)));
      }
      if (n == 0) {
        throw ExternalModelError(std::string("external model closed its output while sending ") +
                                 what + "; partial reply: '" + excerpt(buffer_) + "'");
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  static std::string excerpt(const std::string& s) {
    constexpr std::size_t kMax = 120;
    return s.size() <= kMax ? s : s.substr(0, kMax) + "...";
  }

  void shutdown() noexcept {
    if (write_fd_ >= 0) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    write_fd_ = read_fd_ = -1;
    if (pid_ <= 0) return;
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, nullptr, WNOHANG) == pid_) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, nullptr, 0);
  }

  std::string command_;
  std::chrono::milliseconds timeout_;
  pid_t pid_ = -1;
  int write_fd_ = -1;
  int read_fd_ = -1;
  std::string buffer_;
  Eigen::Index dimension_ = 0;
  int window_length_ = 0;
  bool batch_ = false;
};

}  // namespace ensf
