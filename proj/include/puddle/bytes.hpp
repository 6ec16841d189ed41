#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "puddle/error.hpp"

namespace puddle {

static_assert(std::endian::native == std::endian::little,
              "on-media formats are little-endian and accessed in place");

using Bytes = std::vector<std::byte>;
using ByteSpan = std::span<const std::byte>;

template <class T>
    requires std::is_trivially_copyable_v<T>
T load(const void* src) noexcept
{
    T value;
    std::memcpy(&value, src, sizeof(T));
    return value;
}

template <class T>
    requires std::is_trivially_copyable_v<T>
void put(void* dst, const T& value) noexcept
{
    std::memcpy(dst, &value, sizeof(T));
}

template <class T>
    requires std::is_trivially_copyable_v<T>
ByteSpan as_bytes_of(const T& value) noexcept
{
    return {reinterpret_cast<const std::byte*>(&value), sizeof(T)};
}

inline std::uint64_t align_up(std::uint64_t value, std::uint64_t alignment) noexcept
{
    return (value + alignment - 1) / alignment * alignment;
}

/// Append-only little-endian encoder used by the wire protocol, the daemon
/// journal and the export bundle.
class Writer {
public:
    template <class T>
        requires std::is_arithmetic_v<T> || std::is_enum_v<T>
    Writer& pod(T value)
    {
        auto* p = reinterpret_cast<const std::byte*>(&value);
        buf_.insert(buf_.end(), p, p + sizeof(T));
        return *this;
    }
    Writer& u8(std::uint8_t v) { return pod(v); }
    Writer& u16(std::uint16_t v) { return pod(v); }
    Writer& u32(std::uint32_t v) { return pod(v); }
    Writer& u64(std::uint64_t v) { return pod(v); }
    Writer& raw(ByteSpan bytes)
    {
        buf_.insert(buf_.end(), bytes.begin(), bytes.end());
        return *this;
    }
    Writer& str(std::string_view s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        return raw(std::as_bytes(std::span(s.data(), s.size())));
    }

    const Bytes& bytes() const noexcept { return buf_; }
    Bytes take() noexcept { return std::move(buf_); }

private:
    Bytes buf_;
};

/// Bounds-checked decoder; any overrun throws `Errc` supplied at construction.
class Reader {
public:
    explicit Reader(ByteSpan bytes, Errc on_error = Errc::protocol_error) noexcept
        : bytes_(bytes), error_(on_error)
    {
    }

    template <class T>
        requires std::is_arithmetic_v<T> || std::is_enum_v<T>
    T pod()
    {
        need(sizeof(T));
        T v = load<T>(bytes_.data() + pos_);
        pos_ += sizeof(T);
        return v;
    }
    std::uint8_t u8() { return pod<std::uint8_t>(); }
    std::uint16_t u16() { return pod<std::uint16_t>(); }
    std::uint32_t u32() { return pod<std::uint32_t>(); }
    std::uint64_t u64() { return pod<std::uint64_t>(); }
    ByteSpan raw(std::size_t n)
    {
        need(n);
        auto out = bytes_.subspan(pos_, n);
        pos_ += n;
        return out;
    }
    std::string str()
    {
        auto n = u32();
        auto b = raw(n);
        return {reinterpret_cast<const char*>(b.data()), b.size()};
    }

    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
    bool done() const noexcept { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const
    {
        if (bytes_.size() - pos_ < n) {
            fail(error_, "truncated record");
        }
    }

    ByteSpan bytes_;
    std::size_t pos_ = 0;
    Errc error_;
};

} // namespace puddle
