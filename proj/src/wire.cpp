#include "puddle/wire.hpp"

#include <sys/socket.h>

#include <cerrno>
#include <cstring>
#include <string>

namespace puddle::wire {

std::string_view code_name(Code code) noexcept
{
    switch (code) {
    case Code::ping: return "PING";
    case Code::get_new_puddle: return "GET_NEW_PUDDLE";
    case Code::get_exist_puddle: return "GET_EXIST_PUDDLE";
    case Code::free_puddle: return "FREE_PUDDLE";
    case Code::reg_log_space: return "REG_LOG_SPACE";
    case Code::reg_ref_map: return "REG_REF_MAP";
    case Code::create_pool: return "CREATE_POOL";
    case Code::open_pool: return "OPEN_POOL";
    case Code::export_pool: return "EXPORT_POOL";
    case Code::import_bundle: return "IMPORT_BUNDLE";
    case Code::status: return "STATUS";
    case Code::lookup_addr: return "LOOKUP_ADDR";
    case Code::reloc_info: return "RELOC_INFO";
    case Code::mark_relocated: return "MARK_RELOCATED";
    case Code::chmod: return "CHMOD";
    case Code::shutdown: return "SHUTDOWN";
    case Code::list_ref_maps: return "LIST_REF_MAPS";
    case Code::unreg_log_space: return "UNREG_LOG_SPACE";
    case Code::list_pools: return "LIST_POOLS";
    }
    return "?";
}

bool known_code(std::uint16_t code) noexcept
{
    return (code >= 1 && code <= 11) || (code >= 32 && code <= 39);
}

Bytes encode_header(const Frame& frame)
{
    Writer w;
    w.u32(static_cast<std::uint32_t>(kHeader + frame.payload.size()))
        .u16(static_cast<std::uint16_t>(frame.code))
        .u16(frame.status)
        .u64(frame.id);
    return w.take();
}

namespace {

void send_all(int sock, const std::byte* p, std::size_t n)
{
    while (n > 0) {
        auto k = ::send(sock, p, n, MSG_NOSIGNAL);
        if (k < 0) {
            if (errno == EINTR) {
                continue;
            }
            fail(Errc::io_failure, std::string("send: ") + std::strerror(errno));
        }
        p += k;
        n -= static_cast<std::size_t>(k);
    }
}

// Reads exactly n bytes; false on EOF at offset 0 when `eof_ok`.
bool recv_all(int sock, std::byte* p, std::size_t n, bool eof_ok, std::vector<UniqueFd>* fds)
{
    std::size_t got = 0;
    while (got < n) {
        iovec iov{p + got, n - got};
        msghdr msg{};
        msg.msg_iov = &iov;
        msg.msg_iovlen = 1;
        alignas(cmsghdr) char control[CMSG_SPACE(sizeof(int) * kMaxFds)];
        if (fds != nullptr) {
            msg.msg_control = control;
            msg.msg_controllen = sizeof(control);
        }
        auto k = ::recvmsg(sock, &msg, MSG_CMSG_CLOEXEC);
        if (k < 0) {
            if (errno == EINTR) {
                continue;
            }
            fail(Errc::io_failure, std::string("recv: ") + std::strerror(errno));
        }
        if (fds != nullptr) {
            for (auto* c = CMSG_FIRSTHDR(&msg); c != nullptr; c = CMSG_NXTHDR(&msg, c)) {
                if (c->cmsg_level == SOL_SOCKET && c->cmsg_type == SCM_RIGHTS) {
                    auto count = (c->cmsg_len - CMSG_LEN(0)) / sizeof(int);
                    for (std::size_t i = 0; i < count; ++i) {
                        int fd;
                        std::memcpy(&fd, CMSG_DATA(c) + i * sizeof(int), sizeof(int));
                        fds->emplace_back(fd);
                    }
                }
            }
            fds = nullptr; // descriptors ride on the first segment only
        }
        if (k == 0) {
            if (got == 0 && eof_ok) {
                return false;
            }
            fail(Errc::protocol_error, "connection closed mid-frame");
        }
        got += static_cast<std::size_t>(k);
    }
    return true;
}

} // namespace

void send_frame(int sock, const Frame& frame)
{
    if (frame.fds.size() > kMaxFds) {
        fail(Errc::protocol_error, "too many descriptors in one frame");
    }
    auto header = encode_header(frame);
    iovec iov[2] = {{header.data(), header.size()},
                    {const_cast<std::byte*>(frame.payload.data()), frame.payload.size()}};
    msghdr msg{};
    msg.msg_iov = iov;
    msg.msg_iovlen = frame.payload.empty() ? 1 : 2;
    alignas(cmsghdr) char control[CMSG_SPACE(sizeof(int) * kMaxFds)];
    if (!frame.fds.empty()) {
        msg.msg_control = control;
        msg.msg_controllen = CMSG_SPACE(sizeof(int) * frame.fds.size());
        auto* c = CMSG_FIRSTHDR(&msg);
        c->cmsg_level = SOL_SOCKET;
        c->cmsg_type = SCM_RIGHTS;
        c->cmsg_len = CMSG_LEN(sizeof(int) * frame.fds.size());
        for (std::size_t i = 0; i < frame.fds.size(); ++i) {
            int fd = frame.fds[i].get();
            std::memcpy(CMSG_DATA(c) + i * sizeof(int), &fd, sizeof(int));
        }
    }
    std::size_t total = header.size() + frame.payload.size();
    ssize_t k;
    do {
        k = ::sendmsg(sock, &msg, MSG_NOSIGNAL);
    } while (k < 0 && errno == EINTR);
    if (k < 0) {
        fail(Errc::io_failure, std::string("sendmsg: ") + std::strerror(errno));
    }
    // Short write: push the remainder without descriptors.
    auto sent = static_cast<std::size_t>(k);
    if (sent < total) {
        Bytes all = header;
        all.insert(all.end(), frame.payload.begin(), frame.payload.end());
        send_all(sock, all.data() + sent, total - sent);
    }
}

bool recv_frame(int sock, Frame& out)
{
    std::byte header[kHeader];
    out.fds.clear();
    if (!recv_all(sock, header, kHeader, true, &out.fds)) {
        return false;
    }
    Reader r({header, kHeader});
    auto len = r.u32();
    auto code = r.u16();
    out.status = r.u16();
    out.id = r.u64();
    if (len < kHeader || len > kMaxFrame) {
        fail(Errc::protocol_error, "bad frame length");
    }
    if (!known_code(code)) {
        fail(Errc::protocol_error, "unknown request code " + std::to_string(code));
    }
    out.code = static_cast<Code>(code);
    out.payload.resize(len - kHeader);
    if (!out.payload.empty()) {
        recv_all(sock, out.payload.data(), out.payload.size(), false, nullptr);
    }
    return true;
}

void throw_if_error(const Frame& response)
{
    if (response.status == 0) {
        return;
    }
    std::string what(reinterpret_cast<const char*>(response.payload.data()), response.payload.size());
    throw Error(response.errc(), what.empty() ? std::string(errc_name(response.errc())) : what);
}

} // namespace puddle::wire
