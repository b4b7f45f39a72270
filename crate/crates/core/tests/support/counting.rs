//! Closed-form parameter counts written from the layer tables alone.
//!
//! Nothing here touches the graph builder: every count is
//! `k³·in/groups·out` per convolution, `2·C` per batch norm and `F·K + K`
//! for the classifier.

fn conv(k: u64, cin: u64, cout: u64, groups: u64) -> u64 {
    k * k * k * cin / groups * cout
}

fn bn(c: u64) -> u64 {
    2 * c
}

fn projection(cin: u64, cout: u64, stride: u64) -> u64 {
    if cin == cout && stride == 1 {
        0
    } else {
        conv(1, cin, cout, 1) + bn(cout)
    }
}

pub fn basic_block(cin: u64, cout: u64, stride: u64) -> u64 {
    conv(3, cin, cout, 1) + bn(cout) + conv(3, cout, cout, 1) + bn(cout) + projection(cin, cout, stride)
}

pub fn bottleneck_block(cin: u64, mid: u64, cout: u64, stride: u64, groups: u64) -> u64 {
    conv(1, cin, mid, 1)
        + bn(mid)
        + conv(3, mid, mid, groups)
        + bn(mid)
        + conv(1, mid, cout, 1)
        + bn(cout)
        + projection(cin, cout, stride)
}

pub fn preact_block(cin: u64, mid: u64, cout: u64, stride: u64) -> u64 {
    bn(cin) + conv(1, cin, mid, 1) + bn(mid) + conv(3, mid, mid, 1) + bn(mid) + conv(1, mid, cout, 1) + projection(cin, cout, stride)
}

fn stem(width: u64) -> u64 {
    conv(7, 3, width, 1) + bn(width)
}

fn head(features: u64, classes: u64) -> u64 {
    features * classes + classes
}

#[derive(Clone, Copy)]
enum Kind {
    Basic,
    Bottleneck { mid_mult: u64, out_mult: u64, groups: u64 },
    Preact,
}

fn resnet(depths: [u64; 4], stem_w: u64, planes0: u64, kind: Kind, classes: u64) -> u64 {
    let mut total = stem(stem_w);
    let mut cin = stem_w;
    for (s, &d) in depths.iter().enumerate() {
        let planes = planes0 << s;
        for b in 0..d {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let (n, cout) = match kind {
                Kind::Basic => (basic_block(cin, planes, stride), planes),
                Kind::Bottleneck { mid_mult, out_mult, groups } => {
                    let cout = planes * out_mult;
                    (bottleneck_block(cin, planes * mid_mult, cout, stride, groups), cout)
                }
                Kind::Preact => (preact_block(cin, planes, 4 * planes, stride), 4 * planes),
            };
            total += n;
            cin = cout;
        }
    }
    if matches!(kind, Kind::Preact) {
        total += bn(cin);
    }
    total + head(cin, classes)
}

/// Channels after the last dense block, and the parameter count.
pub fn densenet(config: [u64; 4], growth: u64, classes: u64) -> (u64, u64) {
    let mut c = 64;
    let mut total = stem(64);
    for (i, &layers) in config.iter().enumerate() {
        for _ in 0..layers {
            total += bn(c) + conv(1, c, 4 * growth, 1) + bn(4 * growth) + conv(3, 4 * growth, growth, 1);
            c += growth;
        }
        if i < 3 {
            let out = c / 2;
            total += bn(c) + conv(1, c, out, 1);
            c = out;
        }
    }
    total += bn(c);
    (c, total + head(c, classes))
}

/// Parameter total for a named architecture with `classes` outputs.
pub fn named(name: &str, classes: u64) -> u64 {
    let plain = Kind::Bottleneck { mid_mult: 1, out_mult: 4, groups: 1 };
    match name {
        "resnet-18" => resnet([2, 2, 2, 2], 64, 64, Kind::Basic, classes),
        "resnet-34" => resnet([3, 4, 6, 3], 64, 64, Kind::Basic, classes),
        "resnet-50" => resnet([3, 4, 6, 3], 64, 64, plain, classes),
        "resnet-101" => resnet([3, 4, 23, 3], 64, 64, plain, classes),
        "resnet-152" => resnet([3, 8, 36, 3], 64, 64, plain, classes),
        "preact-resnet-200" => resnet([3, 24, 36, 3], 64, 64, Kind::Preact, classes),
        "wide-resnet-50" => resnet([3, 4, 6, 3], 64, 64, Kind::Bottleneck { mid_mult: 2, out_mult: 4, groups: 1 }, classes),
        // grouped width 128·2^s, output twice that
        "resnext-101" => resnet([3, 4, 23, 3], 64, 128, Kind::Bottleneck { mid_mult: 1, out_mult: 2, groups: 32 }, classes),
        "densenet-121" => densenet([6, 12, 24, 16], 32, classes).1,
        "densenet-201" => densenet([6, 12, 48, 32], 32, classes).1,
        "miniature" => resnet([1, 1, 1, 1], 8, 8, Kind::Basic, classes),
        other => panic!("no oracle for {other}"),
    }
}
