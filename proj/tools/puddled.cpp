// puddled: serves puddles, pools and recovery over a unix socket.

#include <csignal>
#include <iostream>

#include "CLI11.hpp"
#include "puddle/client.hpp"
#include "puddle/daemon.hpp"

namespace {

puddle::Server* g_server = nullptr;

extern "C" void on_signal(int)
{
    if (g_server != nullptr) {
        g_server->stop();
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"puddle daemon"};
    std::string socket;
    std::string data_dir;
    bool power_cycle = false;
    std::uint64_t journal = 4ull << 20;
    app.add_option("--socket", socket, "unix socket path (default $PUDDLED_SOCKET or /tmp/puddled.sock)");
    app.add_option("--data-dir", data_dir, "puddle storage (default $PUDDLED_DIR or /var/lib/puddled)");
    app.add_flag("--power-cycle", power_cycle, "start as after power loss: discard unflushed data");
    app.add_option("--journal-bytes", journal, "registry journal capacity");
    CLI11_PARSE(app, argc, argv);

    try {
        puddle::daemon::DaemonOptions o;
        o.data_dir = puddle::default_data_dir(data_dir);
        o.power_cycle = power_cycle;
        o.journal_capacity = journal;
        std::filesystem::create_directories(o.data_dir);

        // The daemon takes the data-dir lock and recovers before the socket
        // is replaced, so a second instance fails without unlinking it.
        puddle::daemon::Daemon d(o);
        puddle::Server server(puddle::default_socket_path(socket));
        const auto& rec = d.recovery();
        std::cerr << "puddled: serving " << server.path().string() << " from " << o.data_dir.string();
        if (rec.ran) {
            std::cerr << " (recovered: " << rec.logs_replayed << " logs, " << rec.entries_applied << " entries, "
                      << rec.quarantined.size() << " quarantined)";
        }
        std::cerr << '\n';

        g_server = &server;
        struct sigaction sa {};
        sa.sa_handler = on_signal;
        sigemptyset(&sa.sa_mask);
        ::sigaction(SIGTERM, &sa, nullptr);
        ::sigaction(SIGINT, &sa, nullptr);
        std::signal(SIGPIPE, SIG_IGN);

        server.run(d);
        g_server = nullptr;
    } catch (const std::exception& e) {
        std::cerr << "puddled: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
