#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>

namespace eitmem {

using real = double;
using complex = std::complex<double>;

inline constexpr real two_pi = 2.0 * std::numbers::pi;
inline constexpr real speed_of_light = 299792458.0;
/// Gaussian FWHM = fwhm_per_sigma * sigma.
inline constexpr real fwhm_per_sigma = 2.3548200450309493;

/// Frequencies cross the I/O boundary in Hz and live internally in rad/s.
constexpr real hz_to_rad(real hz) { return two_pi * hz; }
constexpr real rad_to_hz(real rad) { return rad / two_pi; }

/*
 * Error hierarchy. Each error carries the process exit code the CLI maps it
 * to: 2 configuration, 3 numerical guard, 4 analysis. Usage errors share the
 * configuration code.
 */
class error : public std::runtime_error
{
public:
    error(const std::string& what, int exit_code)
        : std::runtime_error(what), m_exit_code(exit_code)
    {
    }

    int exit_code() const { return m_exit_code; }

private:
    int m_exit_code;
};

class config_error : public error
{
public:
    explicit config_error(const std::string& what) : error(what, 2) {}
};

class usage_error : public error
{
public:
    explicit usage_error(const std::string& what) : error(what, 2) {}
};

class step_size_error : public error
{
public:
    explicit step_size_error(const std::string& what) : error(what, 3) {}
};

class analysis_error : public error
{
public:
    explicit analysis_error(const std::string& what) : error(what, 4) {}
};

} // namespace eitmem
