use rand::Rng;
use serde::{Deserialize, Serialize};

/// Physical parameters hidden from the student.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub friction: f64,
    /// Payload added to the 12 kg base, kg.
    pub added_mass: f64,
    /// Proportional gain, N·m/rad.
    pub kp: f64,
    /// Derivative gain, N·m·s/rad.
    pub kd: f64,
}

impl EnvParams {
    /// Centre of the training ranges.
    pub fn nominal() -> Self {
        Self {
            friction: 0.875,
            added_mass: 2.5,
            kp: 55.0,
            kd: 0.8,
        }
    }

    pub fn to_array(self) -> [f32; 4] {
        [
            self.friction as f32,
            self.added_mass as f32,
            self.kp as f32,
            self.kd as f32,
        ]
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        Self {
            friction: a[0] as f64,
            added_mass: a[1] as f64,
            kp: a[2] as f64,
            kd: a[3] as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeSet {
    Training,
    Testing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRanges {
    pub friction: (f64, f64),
    pub added_mass: (f64, f64),
    pub kp: (f64, f64),
    pub kd: (f64, f64),
}

impl RangeSet {
    pub fn ranges(self) -> ParamRanges {
        match self {
            RangeSet::Training => ParamRanges {
                friction: (0.5, 1.25),
                added_mass: (0.0, 5.0),
                kp: (45.0, 65.0),
                kd: (0.7, 0.9),
            },
            RangeSet::Testing => ParamRanges {
                friction: (0.1, 2.0),
                added_mass: (0.0, 7.0),
                kp: (40.0, 70.0),
                kd: (0.6, 1.0),
            },
        }
    }
}

impl ParamRanges {
    pub fn contains(&self, p: &EnvParams) -> bool {
        let within = |(lo, hi): (f64, f64), v: f64| lo <= v && v <= hi;
        within(self.friction, p.friction)
            && within(self.added_mass, p.added_mass)
            && within(self.kp, p.kp)
            && within(self.kd, p.kd)
    }
}

/// Draws every parameter uniformly from its range.
pub fn sample_env_params(ranges: RangeSet, rng: &mut impl Rng) -> EnvParams {
    let r = ranges.ranges();
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.gen::<f64>();
    EnvParams {
        friction: draw(r.friction),
        added_mass: draw(r.added_mass),
        kp: draw(r.kp),
        kd: draw(r.kd),
    }
}
