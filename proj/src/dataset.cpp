#include "eelab/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "eelab/errors.hpp"
#include "eelab/rng.hpp"

namespace eelab {

namespace {

std::vector<unsigned char> read_all(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open file: " + path);
    is.seekg(0, std::ios::end);
    const std::streamoff n = is.tellg();
    is.seekg(0, std::ios::beg);
    std::vector<unsigned char> buf(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(buf.data()), n);
    if (!is) throw DataError("read failed: " + path);
    return buf;
}

std::uint32_t be32(const std::vector<unsigned char>& buf, std::size_t at, const std::string& path) {
    if (at + 4 > buf.size())
        throw FormatError(path + ": truncated at byte offset " + std::to_string(at));
    return (static_cast<std::uint32_t>(buf[at]) << 24) |
           (static_cast<std::uint32_t>(buf[at + 1]) << 16) |
           (static_cast<std::uint32_t>(buf[at + 2]) << 8) | static_cast<std::uint32_t>(buf[at + 3]);
}

struct IdxArray {
    std::vector<std::uint32_t> dims;
    std::size_t data_offset = 0;
    std::vector<unsigned char> bytes;
};

IdxArray parse_idx(const std::string& path, std::uint32_t expected_magic) {
    IdxArray arr;
    arr.bytes = read_all(path);
    const std::uint32_t magic = be32(arr.bytes, 0, path);
    if (magic != expected_magic)
        throw FormatError(path + ": bad magic number at byte offset 0 (got 0x" +
                          [&] {
                              char hex[16];
                              std::snprintf(hex, sizeof hex, "%08x", magic);
                              return std::string(hex);
                          }() +
                          ")");
    const std::uint32_t ndim = magic & 0xff;
    std::size_t at = 4;
    std::size_t total = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
        arr.dims.push_back(be32(arr.bytes, at, path));
        total *= arr.dims.back();
        at += 4;
    }
    arr.data_offset = at;
    if (arr.bytes.size() < at + total)
        throw FormatError(path + ": truncated at byte offset " + std::to_string(arr.bytes.size()));
    return arr;
}

}  // namespace

Dataset load_synthetic_blobs(const BlobsSpec& spec) {
    if (spec.classes < 1 || spec.dim < 1 || spec.per_class < 1)
        throw ConfigError("synthetic-blobs: classes, dim, per_class must be positive");
    Rng rng(derive_seed(spec.seed, "blobs"));
    Matf centers(spec.classes, spec.dim);
    for (int c = 0; c < spec.classes; ++c)
        for (int d = 0; d < spec.dim; ++d) centers(c, d) = static_cast<float>(rng.uniform());
    Dataset ds;
    ds.x.resize(static_cast<Eigen::Index>(spec.classes) * spec.per_class, spec.dim);
    Eigen::Index at = 0;
    for (int c = 0; c < spec.classes; ++c) {
        for (int i = 0; i < spec.per_class; ++i) {
            for (int d = 0; d < spec.dim; ++d)
                ds.x(at, d) =
                    centers(c, d) + static_cast<float>(spec.sigma * rng.gaussian());
            ds.labels.push_back(c);
            ++at;
        }
    }
    return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& test_images_path, const std::string& test_labels_path) {
    auto append = [](Dataset& ds, const std::string& ipath, const std::string& lpath,
                     bool test) {
        IdxArray images = parse_idx(ipath, 0x00000803u);
        IdxArray labels = parse_idx(lpath, 0x00000801u);
        if (images.dims.empty() || labels.dims.size() != 1)
            throw FormatError(ipath + ": unexpected dimension count");
        const std::size_t n = images.dims[0];
        if (labels.dims[0] != n)
            throw DataError(ipath + ": image count " + std::to_string(n) +
                            " != label count " + std::to_string(labels.dims[0]));
        std::size_t feat = 1;
        for (std::size_t d = 1; d < images.dims.size(); ++d) feat *= images.dims[d];
        const Eigen::Index base = ds.x.rows();
        Matf grown(base + static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(feat));
        if (base > 0) grown.topRows(base) = ds.x;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t f = 0; f < feat; ++f)
                grown(base + static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f)) =
                    static_cast<float>(images.bytes[images.data_offset + i * feat + f]) / 255.0f;
            ds.labels.push_back(static_cast<int>(labels.bytes[labels.data_offset + i]));
            ds.is_test.push_back(test ? 1 : 0);
        }
        ds.x = std::move(grown);
    };
    Dataset ds;
    append(ds, images_path, labels_path, false);
    if (!test_images_path.empty()) {
        if (test_labels_path.empty()) throw ConfigError("idx-images: test labels path missing");
        append(ds, test_images_path, test_labels_path, true);
    } else {
        ds.is_test.clear();  // no source split
    }
    return ds;
}

Dataset load_cifar_binary(const std::string& train_path, const std::string& test_path) {
    constexpr std::size_t kRecord = 3073;  // 1 label byte + 32*32*3 pixels
    auto append = [&](Dataset& ds, const std::string& path, bool test) {
        std::vector<unsigned char> bytes = read_all(path);
        if (bytes.empty() || bytes.size() % kRecord != 0)
            throw FormatError(path + ": truncated record at byte offset " +
                              std::to_string(bytes.size() - bytes.size() % kRecord));
        const std::size_t n = bytes.size() / kRecord;
        const Eigen::Index base = ds.x.rows();
        Matf grown(base + static_cast<Eigen::Index>(n), 3072);
        if (base > 0) grown.topRows(base) = ds.x;
        for (std::size_t i = 0; i < n; ++i) {
            ds.labels.push_back(static_cast<int>(bytes[i * kRecord]));
            for (std::size_t f = 0; f < 3072; ++f)
                grown(base + static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f)) =
                    static_cast<float>(bytes[i * kRecord + 1 + f]) / 255.0f;
            ds.is_test.push_back(test ? 1 : 0);
        }
        ds.x = std::move(grown);
    };
    Dataset ds;
    append(ds, train_path, false);
    if (!test_path.empty())
        append(ds, test_path, true);
    else
        ds.is_test.clear();
    return ds;
}

Dataset load_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open file: " + path);
    Dataset ds;
    std::vector<std::vector<float>> rows;
    std::string line;
    std::size_t lineno = 0;
    Eigen::Index width = -1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<float> vals;
        const char* p = line.data();
        const char* end = line.data() + line.size();
        while (p < end) {
            const char* comma = std::find(p, end, ',');
            double v = 0;
            auto [ptr, ec] = std::from_chars(p, comma, v);
            if (ec != std::errc() || ptr != comma)
                throw FormatError(path + ": bad number on line " + std::to_string(lineno));
            vals.push_back(static_cast<float>(v));
            p = comma < end ? comma + 1 : end;
        }
        if (vals.size() < 2)
            throw FormatError(path + ": line " + std::to_string(lineno) +
                              " needs a label and at least one feature");
        const int label = static_cast<int>(vals[0]);
        if (label < 0 || static_cast<float>(label) != vals[0])
            throw FormatError(path + ": label out of range on line " + std::to_string(lineno));
        if (width < 0)
            width = static_cast<Eigen::Index>(vals.size()) - 1;
        else if (width != static_cast<Eigen::Index>(vals.size()) - 1)
            throw FormatError(path + ": ragged row on line " + std::to_string(lineno));
        ds.labels.push_back(label);
        rows.push_back(std::vector<float>(vals.begin() + 1, vals.end()));
    }
    ds.x.resize(static_cast<Eigen::Index>(rows.size()), std::max<Eigen::Index>(width, 0));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (Eigen::Index f = 0; f < width; ++f)
            ds.x(static_cast<Eigen::Index>(i), f) = rows[i][static_cast<std::size_t>(f)];
    return ds;
}

ContinualScenario split_tasks(const Dataset& dataset, int num_tasks, std::uint64_t seed) {
    if (num_tasks < 1) throw ConfigError("split_tasks: need at least one task");
    std::set<int> label_set(dataset.labels.begin(), dataset.labels.end());
    std::vector<int> distinct(label_set.begin(), label_set.end());
    if (static_cast<int>(distinct.size()) < num_tasks)
        throw ConfigError("split_tasks: more tasks than classes");

    Rng rng(derive_seed(seed, "split_tasks"));
    rng.shuffle(distinct);

    const int base = static_cast<int>(distinct.size()) / num_tasks;
    const int rem = static_cast<int>(distinct.size()) % num_tasks;

    ContinualScenario sc;
    sc.num_classes = static_cast<int>(distinct.size());
    sc.orig_label_of_class = distinct;
    std::map<int, int> global_of_orig;
    for (std::size_t g = 0; g < distinct.size(); ++g)
        global_of_orig[distinct[g]] = static_cast<int>(g);

    std::map<int, std::vector<Eigen::Index>> rows_of_orig;
    for (std::size_t i = 0; i < dataset.labels.size(); ++i)
        rows_of_orig[dataset.labels[i]].push_back(static_cast<Eigen::Index>(i));

    int next_class = 0;
    for (int t = 0; t < num_tasks; ++t) {
        TaskData task;
        task.task_index = t + 1;
        task.classes.begin = next_class;
        task.classes.count = base + (t < rem ? 1 : 0);
        next_class = task.classes.end();

        std::vector<Eigen::Index> train_rows, test_rows;
        std::vector<int> train_labels, test_labels;
        for (int g = task.classes.begin; g < task.classes.end(); ++g) {
            const int orig = distinct[static_cast<std::size_t>(g)];
            std::vector<Eigen::Index> rows = rows_of_orig[orig];
            if (dataset.is_test.empty()) {
                Rng split_rng(derive_seed(seed, "class_split", static_cast<std::uint64_t>(g)));
                split_rng.shuffle(rows);
                const std::size_t n_train =
                    std::max<std::size_t>(1, rows.size() * 8 / 10);
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    if (i < n_train) {
                        train_rows.push_back(rows[i]);
                        train_labels.push_back(g);
                    } else {
                        test_rows.push_back(rows[i]);
                        test_labels.push_back(g);
                    }
                }
            } else {
                for (Eigen::Index r : rows) {
                    if (dataset.is_test[static_cast<std::size_t>(r)]) {
                        test_rows.push_back(r);
                        test_labels.push_back(g);
                    } else {
                        train_rows.push_back(r);
                        train_labels.push_back(g);
                    }
                }
            }
        }
        task.train_x.resize(static_cast<Eigen::Index>(train_rows.size()), dataset.x.cols());
        for (std::size_t i = 0; i < train_rows.size(); ++i)
            task.train_x.row(static_cast<Eigen::Index>(i)) = dataset.x.row(train_rows[i]);
        task.train_y = std::move(train_labels);
        task.test_x.resize(static_cast<Eigen::Index>(test_rows.size()), dataset.x.cols());
        for (std::size_t i = 0; i < test_rows.size(); ++i)
            task.test_x.row(static_cast<Eigen::Index>(i)) = dataset.x.row(test_rows[i]);
        task.test_y = std::move(test_labels);
        sc.tasks.push_back(std::move(task));
    }
    return sc;
}

}  // namespace eelab
