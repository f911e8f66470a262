#include "xmgc/threads.hpp"

#include <cstdlib>

namespace xmgc {

namespace {

int read_env_cap() {
    const char* env = std::getenv("XMGC_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || v < 1) return 1;
    return static_cast<int>(std::min<long>(v, 256));
}

int& thread_cap() {
    static int cap = read_env_cap();
    return cap;
}

}  // namespace

int worker_threads() { return thread_cap(); }

void set_worker_threads(int n) { thread_cap() = std::max(1, n); }

}  // namespace xmgc
