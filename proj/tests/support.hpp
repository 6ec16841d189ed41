#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>

#include "puddle/error.hpp"
#include "puddle/pmem.hpp"

namespace puddle::testing {

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir()
    {
        std::string tmpl = (std::filesystem::temp_directory_path() / "puddlekit-XXXXXX").string();
        if (::mkdtemp(tmpl.data()) == nullptr) {
            throw std::runtime_error("mkdtemp failed");
        }
        path_ = tmpl;
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Writes a post-crash image (backing and shadow) and opens it as a domain.
inline std::unique_ptr<pmem::PersistentDomain> load_image(const std::filesystem::path& path,
                                                          const Bytes& image,
                                                          pmem::Platform& platform)
{
    for (const auto& p : {path, pmem::shadow_path(path)}) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(image.data()), static_cast<long>(image.size()));
    }
    pmem::OpenOptions o;
    o.platform = &platform;
    return pmem::PersistentDomain::open(path, 0, o);
}

template <class Fn>
Errc errc_of(Fn&& fn)
{
    try {
        fn();
    } catch (const Error& e) {
        return e.errc();
    }
    return Errc::ok;
}

} // namespace puddle::testing
