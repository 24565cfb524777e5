#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "dk/tensor.hpp"
#include "dk/tensor_io.hpp"

using dk::Matrix;
using dk::Tensor;

TEST_CASE("tensor_new fills") {
    Tensor<double> z = dk::tensor_new(1, 1, 2, 2, 0.0);
    for (double v : z.data()) CHECK(v == 0.0);

    Tensor<double> s = dk::tensor_new(1, 1, 1, 1, 3.5);
    CHECK(s(0, 0, 0, 0) == 3.5);

    Tensor<double> ones = dk::tensor_new(2, 3, 4, 4, 1.0);
    double sum = 0.0;
    for (double v : ones.data()) sum += v;
    CHECK(sum == 96.0);
}

TEST_CASE("tensor write/read round-trip") {
    Tensor<double> t(2, 2, 3, 3);
    t(1, 0, 2, 1) = -7.25;
    CHECK(t(1, 0, 2, 1) == -7.25);
    CHECK(t(0, 0, 0, 0) == 0.0);
}

TEST_CASE("relu definition and idempotence") {
    Tensor<double> t(1, 1, 1, 3);
    t(0, 0, 0, 0) = -1.0;
    t(0, 0, 0, 1) = 0.0;
    t(0, 0, 0, 2) = 2.0;
    Tensor<double> r = dk::relu(t);
    CHECK(r(0, 0, 0, 0) == 0.0);
    CHECK(r(0, 0, 0, 1) == 0.0);
    CHECK(r(0, 0, 0, 2) == 2.0);

    Tensor<double> pos(1, 1, 2, 2, 4.0);
    CHECK(dk::relu(pos).data() == pos.data());
    Tensor<double> neg(1, 1, 2, 2, -4.0);
    const Tensor<double> rneg = dk::relu(neg);
    for (double v : rneg.data()) CHECK(v == 0.0);
    CHECK(dk::relu(dk::relu(t)).data() == r.data());
}

TEST_CASE("global_avg_pool") {
    Tensor<double> t(1, 1, 2, 2);
    t(0, 0, 0, 0) = 1.0;
    t(0, 0, 0, 1) = 3.0;
    t(0, 0, 1, 0) = 5.0;
    t(0, 0, 1, 1) = 7.0;
    CHECK(dk::global_avg_pool(t)(0, 0, 0, 0) == doctest::Approx(4.0).epsilon(1e-15));

    Tensor<double> c(2, 3, 5, 7, 2.75);
    Tensor<double> p = dk::global_avg_pool(c);
    for (double v : p.data()) CHECK(v == doctest::Approx(2.75).epsilon(1e-12));

    Tensor<double> one(1, 1, 1, 1, -9.5);
    CHECK(dk::global_avg_pool(one)(0, 0, 0, 0) == -9.5);
}

TEST_CASE("fully_connected") {
    Tensor<double> x(1, 2, 1, 1);
    x(0, 0, 0, 0) = 1.0;
    x(0, 1, 0, 0) = 2.0;

    Tensor<double> same = dk::fully_connected(x, Matrix<double>::identity(2),
                                              std::vector<double>(2, 0.0));
    CHECK(same(0, 0, 0, 0) == 1.0);
    CHECK(same(0, 1, 0, 0) == 2.0);

    Matrix<double> zero(3, 2);
    Tensor<double> biased = dk::fully_connected(x, zero, {4.0, 5.0, 6.0});
    CHECK(biased(0, 0, 0, 0) == 4.0);
    CHECK(biased(0, 2, 0, 0) == 6.0);

    Matrix<double> w(2, 2);
    w(0, 0) = 1.0; w(0, 1) = 1.0;
    w(1, 0) = 1.0; w(1, 1) = -1.0;
    Tensor<double> y = dk::fully_connected(x, w, std::vector<double>(2, 0.0));
    CHECK(y(0, 0, 0, 0) == 3.0);
    CHECK(y(0, 1, 0, 0) == -1.0);

    CHECK_THROWS(dk::fully_connected(x, Matrix<double>(2, 3),
                                     std::vector<double>(2, 0.0)));
}

TEST_CASE(".tsr round-trip and validation") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "dk_tsr_test";
    fs::create_directories(dir);
    const std::string path = (dir / "t.tsr").string();

    Tensor<double> t(1, 2, 3, 4);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.5 * i - 3.0;
    dk::save_tsr(t, path);
    Tensor<double> back = dk::load_tsr<double>(path);
    CHECK(back.same_shape(t));
    CHECK(back.data() == t.data());

    // dtype mismatch rejected
    CHECK_THROWS(dk::load_tsr<float>(path));

    // non-finite payload rejected on load
    Tensor<double> bad(1, 1, 1, 1);
    bad(0, 0, 0, 0) = std::numeric_limits<double>::infinity();
    const std::string bad_path = (dir / "bad.tsr").string();
    dk::save_tsr(bad, bad_path);
    CHECK_THROWS(dk::load_tsr<double>(bad_path));
    fs::remove_all(dir);
}
