#pragma once

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "apptool/util.hpp"

namespace apptool::detail {

struct SpawnOutcome {
  int exit_status = 0;   // signal deaths map to 128 + signo
  bool signaled = false;
  int term_signal = 0;
};

inline int exit_status_from_wait(int wait_status, bool* signaled = nullptr, int* sig = nullptr) {
  if (WIFEXITED(wait_status)) return WEXITSTATUS(wait_status);
  if (WIFSIGNALED(wait_status)) {
    if (signaled) *signaled = true;
    if (sig) *sig = WTERMSIG(wait_status);
    return 128 + WTERMSIG(wait_status);
  }
  return 125;
}

/// Runs argv with stdout and stderr merged into one pipe, streaming chunks
/// to `on_output`, and waits for termination. stdin is inherited.
inline SpawnOutcome spawn_capture(const std::vector<std::string>& argv, const fs::path& cwd,
                                  const std::function<void(std::string_view)>& on_output,
                                  const std::vector<std::pair<std::string, std::string>>& env = {}) {
  if (argv.empty()) throw Error("spawn: empty argv");
  int pipefd[2];
  if (::pipe(pipefd) != 0) throw Error("spawn: pipe failed: " + std::string(std::strerror(errno)));

  pid_t pid = ::fork();
  if (pid < 0) {
    ::close(pipefd[0]);
    ::close(pipefd[1]);
    throw Error("spawn: fork failed: " + std::string(std::strerror(errno)));
  }
  if (pid == 0) {
    ::close(pipefd[0]);
    ::dup2(pipefd[1], 1);
    ::dup2(pipefd[1], 2);
    ::close(pipefd[1]);
    if (!cwd.empty() && ::chdir(cwd.c_str()) != 0) {
      std::fprintf(stderr, "cannot chdir to %s: %s\n", cwd.c_str(), std::strerror(errno));
      ::_exit(126);
    }
    for (const auto& [k, v] : env) ::setenv(k.c_str(), v.c_str(), 1);
    std::vector<char*> cargv;
    cargv.reserve(argv.size() + 1);
    for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);
    ::execvp(cargv[0], cargv.data());
    std::fprintf(stderr, "cannot exec %s: %s\n", cargv[0], std::strerror(errno));
    ::_exit(127);
  }

  ::close(pipefd[1]);
  char buf[1 << 14];
  for (;;) {
    ssize_t n = ::read(pipefd[0], buf, sizeof buf);
    if (n > 0) {
      on_output(std::string_view(buf, static_cast<std::size_t>(n)));
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    break;
  }
  ::close(pipefd[0]);

  int wait_status = 0;
  while (::waitpid(pid, &wait_status, 0) < 0) {
    if (errno != EINTR) throw Error("spawn: waitpid failed: " + std::string(std::strerror(errno)));
  }
  SpawnOutcome out;
  out.exit_status = exit_status_from_wait(wait_status, &out.signaled, &out.term_signal);
  return out;
}

}  // namespace apptool::detail
