#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <condition_variable>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "fedst/binio.hpp"

namespace fedst {

enum class TransportMode { InProcessQueue, LoopbackSocket };

inline TransportMode transport_mode_from_name(const std::string& s) {
    if (s == "in_process") return TransportMode::InProcessQueue;
    if (s == "loopback") return TransportMode::LoopbackSocket;
    throw ConfigError("unknown transport mode: " + s);
}

/// Ordered, exactly-once channels between each site and the server. Both
/// endpoints live in this process; the transport carries opaque byte blobs
/// (already-encoded messages). `on_message` observes every sent blob.
class Transport {
public:
    virtual ~Transport() = default;

    virtual void send_to_server(int site, const Bytes& msg) = 0;
    virtual Bytes recv_at_server(int site) = 0;
    virtual void send_to_site(int site, const Bytes& msg) = 0;
    virtual Bytes recv_at_site(int site) = 0;

    std::uint64_t bytes_sent() const { return bytes_sent_; }

    void set_capture(std::function<void(const Bytes&)> hook) { capture_ = std::move(hook); }

protected:
    void account(const Bytes& msg) {
        std::lock_guard<std::mutex> lock(account_mu_);
        bytes_sent_ += msg.size();
        if (capture_) capture_(msg);
    }

private:
    std::mutex account_mu_;
    std::uint64_t bytes_sent_ = 0;
    std::function<void(const Bytes&)> capture_;
};

class InProcessQueueTransport final : public Transport {
public:
    explicit InProcessQueueTransport(int sites) : up_(sites), down_(sites) {}

    void send_to_server(int site, const Bytes& msg) override {
        account(msg);
        std::lock_guard<std::mutex> lock(mu_);
        up_.at(static_cast<std::size_t>(site)).push_back(msg);
    }
    Bytes recv_at_server(int site) override { return pop(up_.at(static_cast<std::size_t>(site)), site); }
    void send_to_site(int site, const Bytes& msg) override {
        account(msg);
        std::lock_guard<std::mutex> lock(mu_);
        down_.at(static_cast<std::size_t>(site)).push_back(msg);
    }
    Bytes recv_at_site(int site) override { return pop(down_.at(static_cast<std::size_t>(site)), site); }

private:
    Bytes pop(std::deque<Bytes>& q, int site) {
        std::lock_guard<std::mutex> lock(mu_);
        if (q.empty())
            throw ProtocolError("no pending message for peer " + std::to_string(site));
        Bytes b = std::move(q.front());
        q.pop_front();
        return b;
    }

    std::mutex mu_;
    std::vector<std::deque<Bytes>> up_, down_;
};

/// TCP over 127.0.0.1. Each message is framed with a u64 little-endian length
/// prefix. One connection per site, established at construction; the "site"
/// end holds the connecting sockets, the "server" end the accepted ones.
/// Sends go through an outbox drained by a writer thread, so a full kernel
/// buffer never blocks the caller and sequential orchestration cannot
/// deadlock against itself.
class LoopbackSocketTransport final : public Transport {
public:
    LoopbackSocketTransport(int sites, std::uint16_t port) {
        const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listener < 0) throw ProtocolError("socket() failed");
        const int one = 1;
        ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = htons(port);
        if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            ::close(listener);
            throw ProtocolError("bind() failed on loopback port " + std::to_string(port));
        }
        socklen_t len = sizeof(addr);
        ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        if (::listen(listener, sites) != 0) {
            ::close(listener);
            throw ProtocolError("listen() failed");
        }
        site_fd_.resize(static_cast<std::size_t>(sites), -1);
        server_fd_.resize(static_cast<std::size_t>(sites), -1);
        for (int k = 0; k < sites; ++k) {
            const int cli = ::socket(AF_INET, SOCK_STREAM, 0);
            if (cli < 0 || ::connect(cli, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
                ::close(listener);
                throw ProtocolError("connect() failed for site " + std::to_string(k));
            }
            const int srv = ::accept(listener, nullptr, nullptr);
            if (srv < 0) {
                ::close(listener);
                throw ProtocolError("accept() failed");
            }
            // hello frame identifies the site on the accepted socket
            std::uint32_t hello = htonl(static_cast<std::uint32_t>(k));
            write_all(cli, &hello, sizeof(hello));
            std::uint32_t got = 0;
            read_all(srv, &got, sizeof(got));
            const int site = static_cast<int>(ntohl(got));
            site_fd_[static_cast<std::size_t>(k)] = cli;
            server_fd_[static_cast<std::size_t>(site)] = srv;
        }
        ::close(listener);
        writer_ = std::thread([this] { writer_loop(); });
    }

    ~LoopbackSocketTransport() override {
        {
            std::lock_guard<std::mutex> lock(out_mu_);
            closing_ = true;
        }
        out_cv_.notify_all();
        if (writer_.joinable()) writer_.join();
        for (int fd : site_fd_)
            if (fd >= 0) ::close(fd);
        for (int fd : server_fd_)
            if (fd >= 0) ::close(fd);
    }

    std::uint16_t port() const { return port_; }

    void send_to_server(int site, const Bytes& msg) override {
        account(msg);
        send_framed(site_fd_.at(static_cast<std::size_t>(site)), msg);
    }
    Bytes recv_at_server(int site) override {
        return recv_framed(server_fd_.at(static_cast<std::size_t>(site)));
    }
    void send_to_site(int site, const Bytes& msg) override {
        account(msg);
        send_framed(server_fd_.at(static_cast<std::size_t>(site)), msg);
    }
    Bytes recv_at_site(int site) override {
        return recv_framed(site_fd_.at(static_cast<std::size_t>(site)));
    }

private:
    static void write_all(int fd, const void* data, std::size_t n) {
        const char* p = static_cast<const char*>(data);
        while (n > 0) {
            const ssize_t w = ::write(fd, p, n);
            if (w <= 0) throw ProtocolError("socket write failed");
            p += w;
            n -= static_cast<std::size_t>(w);
        }
    }
    static void read_all(int fd, void* data, std::size_t n) {
        char* p = static_cast<char*>(data);
        while (n > 0) {
            const ssize_t r = ::read(fd, p, n);
            if (r <= 0) throw ProtocolError("socket read failed");
            p += r;
            n -= static_cast<std::size_t>(r);
        }
    }
    void send_framed(int fd, const Bytes& msg) {
        {
            std::lock_guard<std::mutex> lock(out_mu_);
            if (closing_) throw ProtocolError("transport is shutting down");
            outbox_.emplace_back(fd, msg);
        }
        out_cv_.notify_one();
    }

    void writer_loop() {
        for (;;) {
            std::pair<int, Bytes> item;
            {
                std::unique_lock<std::mutex> lock(out_mu_);
                out_cv_.wait(lock, [this] { return closing_ || !outbox_.empty(); });
                if (outbox_.empty()) return;
                item = std::move(outbox_.front());
                outbox_.pop_front();
            }
            std::uint8_t hdr[8];
            const std::uint64_t n = item.second.size();
            for (int i = 0; i < 8; ++i) hdr[i] = static_cast<std::uint8_t>(n >> (8 * i));
            write_all(item.first, hdr, 8);
            write_all(item.first, item.second.data(), item.second.size());
        }
    }
    Bytes recv_framed(int fd) {
        std::uint8_t hdr[8];
        read_all(fd, hdr, 8);
        std::uint64_t n = 0;
        for (int i = 7; i >= 0; --i) n = (n << 8) | hdr[i];
        if (n > (1ULL << 31)) throw ProtocolError("unreasonable frame length");
        Bytes msg(static_cast<std::size_t>(n));
        read_all(fd, msg.data(), msg.size());
        return msg;
    }

    std::uint16_t port_ = 0;
    std::vector<int> site_fd_, server_fd_;
    std::thread writer_;
    std::mutex out_mu_;
    std::condition_variable out_cv_;
    std::deque<std::pair<int, Bytes>> outbox_;
    bool closing_ = false;
};

} // namespace fedst
