#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "featrl/tabular.hpp"

using namespace featrl;

namespace {

SchemaSpec schema_of(const std::string& text) {
    std::istringstream in(text);
    return parse_schema(in);
}

Dataset csv_of(const std::string& text, const std::string& schema) {
    std::istringstream in(text);
    return read_csv(in, schema_of(schema));
}

Dataset labels_dataset(const std::vector<int>& y) {
    Column f{"f", ColumnKind::Continuous, {}, {}};
    Column t{"y", ColumnKind::Target, {}, {}};
    for (std::size_t i = 0; i < y.size(); ++i) {
        f.values.push_back(static_cast<double>(i));
        t.values.push_back(y[i]);
    }
    return Dataset({f}, t, Task::Classification);
}

Dataset regression_dataset(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Column f{"f", ColumnKind::Continuous, {}, {}};
    Column t{"y", ColumnKind::Target, {}, {}};
    for (std::size_t i = 0; i < n; ++i) {
        f.values.push_back(g(rng));
        t.values.push_back(g(rng));
    }
    return Dataset({f}, t, Task::Regression);
}

const char* kHealthSchema = "gender = discrete\nweight = continuous\nhealthy = target:discrete\n";

} // namespace

TEST(Csv, LoadsTypedColumns) {
    Dataset d = csv_of("gender,weight,healthy\nm,70.5,yes\nf,55,no\nm,90,no\n", kHealthSchema);
    EXPECT_EQ(d.rows(), 3u);
    ASSERT_EQ(d.feature_count(), 2u);
    EXPECT_EQ(d.feature(0).kind, ColumnKind::Discrete);
    EXPECT_EQ(d.feature(1).kind, ColumnKind::Continuous);
    EXPECT_EQ(d.task(), Task::Classification);
    EXPECT_DOUBLE_EQ(d.feature(1).values[0], 70.5);
    EXPECT_EQ(d.class_count(), 2u);
}

TEST(Csv, FirstAppearanceCodes) {
    Dataset d = csv_of("c,y\nb,1\na,2\nb,3\n", "c = discrete\ny = target\n");
    EXPECT_EQ(d.feature(0).values, (std::vector<double>{0, 1, 0}));
    EXPECT_EQ(d.feature(0).categories, (std::vector<std::string>{"b", "a"}));
    EXPECT_EQ(d.task(), Task::Regression);
}

TEST(Csv, ColumnOrderFollowsHeader) {
    Dataset d = csv_of("healthy,weight,gender\nyes,1,m\nno,2,f\n", kHealthSchema);
    EXPECT_EQ(d.feature(0).name, "weight");
    EXPECT_EQ(d.feature(1).name, "gender");
}

TEST(Csv, QuotedFieldsAndBom) {
    Dataset d = csv_of("\xEF\xBB\xBF\"a,b\",y\n1,2\n3,4\n", "a,b = continuous\ny = target\n");
    EXPECT_EQ(d.feature(0).name, "a,b");
    EXPECT_DOUBLE_EQ(d.feature(0).values[1], 3.0);
}

TEST(Csv, EmptyFileIsZeroRows) {
    try {
        csv_of("", kHealthSchema);
        FAIL();
    } catch (const SchemaError& e) {
        EXPECT_NE(std::string(e.what()).find("zero rows"), std::string::npos);
    }
    try {
        csv_of("gender,weight,healthy\n", kHealthSchema);
        FAIL();
    } catch (const SchemaError& e) {
        EXPECT_NE(std::string(e.what()).find("zero rows"), std::string::npos);
    }
}

TEST(Csv, ErrorsCarryLocation) {
    try {
        csv_of("gender,weight,healthy\nm,1,yes\nf,abc,no\n", kHealthSchema);
        FAIL();
    } catch (const SchemaError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("line 3"), std::string::npos);
        EXPECT_NE(msg.find("weight"), std::string::npos);
    }
    EXPECT_THROW(csv_of("gender,healthy\nm,yes\nf,no\n", kHealthSchema), SchemaError);           // missing column
    EXPECT_THROW(csv_of("gender,weight,healthy\nm,,yes\nf,2,no\n", kHealthSchema), SchemaError); // missing value
    EXPECT_THROW(csv_of("gender,weight,healthy\nm,1\n", kHealthSchema), SchemaError);            // short row
    EXPECT_THROW(csv_of("gender,weight,extra,healthy\nm,1,2,yes\n", kHealthSchema), SchemaError);
}

TEST(Schema, ExactlyOneTarget) {
    EXPECT_THROW(schema_of("a = continuous\n"), SchemaError);
    EXPECT_THROW(schema_of("a = target\nb = target:discrete\n"), SchemaError);
    EXPECT_THROW(schema_of("a = numeric\ny = target\n"), SchemaError);
    EXPECT_THROW(schema_of("a = discrete\na = continuous\ny = target\n"), SchemaError);
    auto s = schema_of("# comment\n a = continuous \n\ny = target:discrete # label\n");
    EXPECT_EQ(s.target, "y");
    EXPECT_EQ(s.task(), Task::Classification);
}

TEST(DatasetInvariants, RejectsMalformed) {
    Column t{"y", ColumnKind::Target, {0, 1}, {}};
    Column bad_len{"a", ColumnKind::Continuous, {1, 2, 3}, {}};
    EXPECT_THROW(Dataset({bad_len}, t, Task::Classification), SchemaError);
    Column nan{"a", ColumnKind::Continuous, {1, std::nan("")}, {}};
    EXPECT_THROW(Dataset({nan}, t, Task::Classification), SchemaError);
    Column frac{"a", ColumnKind::Discrete, {0, 0.5}, {}};
    EXPECT_THROW(Dataset({frac}, t, Task::Classification), SchemaError);
    Column second_target{"b", ColumnKind::Target, {0, 1}, {}};
    EXPECT_THROW(Dataset({second_target}, t, Task::Classification), SchemaError);
    Column one_row{"y", ColumnKind::Target, {0}, {}};
    EXPECT_THROW(Dataset({}, one_row, Task::Regression), SchemaError);
}

TEST(Folds, BalancedBinaryTenRows) {
    Dataset d = labels_dataset({0, 1, 0, 1, 0, 1, 0, 1, 0, 1});
    FoldPlan p = split_folds(d, 5, 42);
    for (std::size_t f = 0; f < 5; ++f) {
        auto rows = p.fold_rows(f);
        ASSERT_EQ(rows.size(), 2u);
        int ones = 0;
        for (auto r : rows) ones += static_cast<int>(d.target().values[r]);
        EXPECT_EQ(ones, 1);
    }
}

TEST(Folds, Deterministic) {
    Dataset d = labels_dataset({0, 1, 1, 0, 2, 2, 1, 0, 2, 1, 0, 2, 1, 0, 0});
    EXPECT_EQ(split_folds(d, 3, 9).assignments, split_folds(d, 3, 9).assignments);
}

TEST(Folds, ElevenRowsFiveFolds) {
    Dataset d = regression_dataset(11, 1);
    FoldPlan p = split_folds(d, 5, 3);
    std::vector<std::size_t> sizes;
    for (std::size_t f = 0; f < 5; ++f) sizes.push_back(p.fold_rows(f).size());
    std::sort(sizes.begin(), sizes.end());
    EXPECT_EQ(sizes, (std::vector<std::size_t>{2, 2, 2, 2, 3}));
}

TEST(Folds, Errors) {
    Dataset d = labels_dataset({0, 0, 0, 0, 0, 1, 1, 1});
    EXPECT_THROW(split_folds(d, 1, 0), ConfigError);
    try {
        split_folds(d, 4, 0);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("class '1'"), std::string::npos);
    }
    EXPECT_THROW(split_folds(regression_dataset(3, 0), 5, 0), DataError);
}

TEST(Folds, ClassErrorUsesLabel) {
    Dataset d = csv_of("gender,weight,healthy\nm,1,yes\nf,2,yes\nm,3,no\nf,4,yes\n", kHealthSchema);
    try {
        split_folds(d, 2, 0);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("'no'"), std::string::npos);
    }
}

TEST(FoldsProperty, PartitionAndStratification) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t k = 2 + rng() % 5;
        const std::size_t classes = 1 + rng() % 4;
        const std::size_t n = k * classes + rng() % 60;
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i < k * classes ? i % classes : rng() % classes);
        std::shuffle(y.begin(), y.end(), rng);
        Dataset d = labels_dataset(y);
        FoldPlan p = split_folds(d, k, rng());
        ASSERT_EQ(p.assignments.size(), n);
        std::vector<std::size_t> size(k, 0);
        std::vector<std::vector<int>> per(classes, std::vector<int>(k, 0));
        for (std::size_t i = 0; i < n; ++i) {
            ASSERT_LT(p.assignments[i], k);
            ++size[p.assignments[i]];
            ++per[static_cast<std::size_t>(y[i])][p.assignments[i]];
        }
        auto [lo, hi] = std::minmax_element(size.begin(), size.end());
        EXPECT_LE(*hi - *lo, 1u);
        EXPECT_GT(*lo, 0u);
        for (const auto& c : per) {
            auto [clo, chi] = std::minmax_element(c.begin(), c.end());
            EXPECT_LE(*chi - *clo, 1);
        }
        std::size_t covered = 0;
        for (std::size_t f = 0; f < k; ++f) covered += p.fold_rows(f).size() ;
        EXPECT_EQ(covered, n);
    }
}

TEST(FoldsProperty, RegressionStratifiesOnQuantileBins) {
    Dataset d = regression_dataset(103, 8);
    FoldPlan p = split_folds(d, 5, 1);
    auto bins = quantile_codes(d.target().values, 5);
    std::map<int, std::vector<int>> per;
    for (std::size_t i = 0; i < d.rows(); ++i) {
        per[bins[i]].resize(5);
        ++per[bins[i]][p.assignments[i]];
    }
    EXPECT_EQ(per.size(), 5u);
    for (auto& [b, c] : per) {
        auto [lo, hi] = std::minmax_element(c.begin(), c.end());
        EXPECT_LE(*hi - *lo, 1);
    }
}

TEST(QuantileCodes, TiesShareBins) {
    std::vector<double> v{5, 1, 1, 1, 1, 2, 3, 4};
    auto c = quantile_codes(v, 4);
    EXPECT_EQ(c[1], c[2]);
    EXPECT_EQ(c[2], c[4]);
    for (std::size_t i = 0; i < v.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j)
            if (v[i] < v[j]) EXPECT_LE(c[i], c[j]);
}

TEST(Descriptor, HandComputedStatistics) {
    Column c{"a", ColumnKind::Continuous, {4, 2, 1, 3}, {}};
    Column t{"y", ColumnKind::Target, {0, 1, 0, 1}, {}};
    Dataset d({c}, t, Task::Regression);
    auto desc = column_descriptor(d, 0);
    EXPECT_DOUBLE_EQ(desc[kMean], 2.5);
    EXPECT_DOUBLE_EQ(desc[kStd], std::sqrt(1.25));
    EXPECT_DOUBLE_EQ(desc[kMin], 1.0);
    EXPECT_DOUBLE_EQ(desc[kMax], 4.0);
    EXPECT_DOUBLE_EQ(desc[kQ25], 1.75);
    EXPECT_DOUBLE_EQ(desc[kQ50], 2.5);
    EXPECT_DOUBLE_EQ(desc[kQ75], 3.25);
    EXPECT_DOUBLE_EQ(desc[kDistinctRatio], 1.0);
}

TEST(Descriptor, ConstantColumn) {
    auto desc = describe_values(std::vector<double>{7, 7, 7}, false);
    EXPECT_DOUBLE_EQ(desc[kMean], 7.0);
    EXPECT_DOUBLE_EQ(desc[kStd], 0.0);
    EXPECT_DOUBLE_EQ(desc[kDistinctRatio], 1.0 / 3.0);
}

TEST(Descriptor, CategoricalUsesFrequencies) {
    // codes 0,0,0,1 -> frequencies {0.75, 0.25}
    auto desc = describe_values(std::vector<double>{0, 0, 1, 0}, true);
    EXPECT_DOUBLE_EQ(desc[kMean], 0.5);
    EXPECT_DOUBLE_EQ(desc[kStd], 0.25);
    EXPECT_DOUBLE_EQ(desc[kMin], 0.25);
    EXPECT_DOUBLE_EQ(desc[kMax], 0.75);
    EXPECT_DOUBLE_EQ(desc[kDistinctRatio], 0.5);
}

TEST(DescriptorProperty, RowShuffleInvariantAndFinite) {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g(0, 1e3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> v(2 + rng() % 40);
        for (auto& x : v) x = trial % 3 == 0 ? std::floor(std::abs(g(rng)) / 300) : g(rng);
        const bool cat = trial % 3 == 0;
        auto a = describe_values(v, cat);
        std::shuffle(v.begin(), v.end(), rng);
        auto b = describe_values(v, cat);
        for (std::size_t i = 0; i < kDescriptorSize; ++i) {
            EXPECT_TRUE(std::isfinite(a[i]));
            EXPECT_NEAR(a[i], b[i], 1e-9 * (1 + std::abs(a[i])));
        }
    }
}

TEST(Descriptor, IdenticalColumnsIdenticalDescriptors) {
    Column a{"a", ColumnKind::Continuous, {1, 5, 2}, {}};
    Column b{"b", ColumnKind::Continuous, {1, 5, 2}, {}};
    Column t{"y", ColumnKind::Target, {0, 1, 2}, {}};
    Dataset d({a, b}, t, Task::Regression);
    EXPECT_EQ(column_descriptor(d, 0), column_descriptor(d, 1));
}
