#include "aftune/isolation.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <csignal>
#include <cstring>
#include <iostream>
#include <iterator>

extern char** environ;

namespace aftune {

int serve_verifier(std::istream& in, std::ostream& out, const VerifierConfig& cfg) {
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  VerificationReport rep;
  try {
    rep = verify_block(VerificationRequest::deserialize(bytes), cfg);
  } catch (const RefusedError& e) {
    rep.verdict = Verdict::refused;
    rep.message = e.what();
  } catch (const Error& e) {
    // A request that cannot be decoded is refused rather than trusted.
    rep.verdict = Verdict::refused;
    rep.message = std::string("malformed request: ") + e.what();
  }
  out << rep.to_json().dump() << '\n';
  out.flush();
  return out ? 0 : 3;
}

namespace {

struct Fd {
  int fd = -1;
  ~Fd() { reset(); }
  void reset() {
    if (fd >= 0) ::close(fd);
    fd = -1;
  }
};

void write_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::write(fd, p, n);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw Error(std::string("writing to verifier process: ") + std::strerror(errno));
    }
    p += w;
    n -= static_cast<std::size_t>(w);
  }
}

}  // namespace

VerificationReport verify_isolated(const VerificationRequest& req, const std::filesystem::path& exe,
                                   const VerifierConfig& cfg) {
  const auto bytes = req.serialize();
  int to_child[2], from_child[2];
  if (::pipe(to_child) != 0) throw Error("pipe failed");
  Fd in_r{to_child[0]}, in_w{to_child[1]};
  if (::pipe(from_child) != 0) throw Error("pipe failed");
  Fd out_r{from_child[0]}, out_w{from_child[1]};

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_adddup2(&fa, in_r.fd, STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&fa, out_w.fd, STDOUT_FILENO);
  posix_spawn_file_actions_addclose(&fa, in_w.fd);
  posix_spawn_file_actions_addclose(&fa, out_r.fd);

  const std::string path = exe.string();
  const std::string budget = std::to_string(cfg.memory_budget);
  std::vector<char*> argv{const_cast<char*>(path.c_str()), const_cast<char*>("verifier-serve"),
                          const_cast<char*>("--memory-budget"), const_cast<char*>(budget.c_str()),
                          nullptr};
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, path.c_str(), &fa, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) throw Error("cannot start verifier " + path + ": " + std::strerror(rc));
  in_r.reset();
  out_w.reset();

  // The child reads the whole request before answering, so writing then reading cannot deadlock.
  std::signal(SIGPIPE, SIG_IGN);
  std::string failure;
  try {
    write_all(in_w.fd, bytes.data(), bytes.size());
  } catch (const Error& e) {
    failure = e.what();
  }
  in_w.reset();

  std::string text;
  char buf[4096];
  for (;;) {
    const ssize_t n = ::read(out_r.fd, buf, sizeof buf);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    text.append(buf, static_cast<std::size_t>(n));
  }
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    throw Error("verifier process for block " + to_string(req.id) + " exited abnormally" +
                (failure.empty() ? "" : " (" + failure + ")"));
  }
  try {
    auto rep = VerificationReport::from_json(nlohmann::json::parse(text));
    rep.id = req.id;
    rep.mode = req.mode;
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw Error("verifier process returned an unreadable report: " + std::string(e.what()));
  }
}

std::filesystem::path self_executable() { return std::filesystem::read_symlink("/proc/self/exe"); }

}  // namespace aftune
