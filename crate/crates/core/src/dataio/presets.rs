//! Built-in class tables and split sizes for the five food types.

use crate::error::{Error, Result};

use super::ClassTable;

pub struct FoodPreset {
    pub name: &'static str,
    /// Food classes after background, in label order.
    pub classes: &'static [&'static str],
    /// Held-out test images.
    pub test_size: usize,
    /// Training images before augmentation.
    pub train_size: usize,
}

pub const FOOD_PRESETS: [FoodPreset; 5] = [
    FoodPreset {
        name: "AdasPolo",
        classes: &["AdasPolo"],
        test_size: 63,
        train_size: 264,
    },
    FoodPreset {
        name: "CheloGoosht",
        classes: &["Meat", "Rice"],
        test_size: 64,
        train_size: 207,
    },
    FoodPreset {
        name: "Fesenjan",
        classes: &["Fesenjan stew", "Rice"],
        test_size: 61,
        train_size: 148,
    },
    FoodPreset {
        name: "GheymeBademjan",
        classes: &["GheymeBademjan stew", "Rice"],
        test_size: 63,
        train_size: 167,
    },
    FoodPreset {
        name: "ProteinFries",
        classes: &["French fries", "Protein"],
        test_size: 103,
        train_size: 273,
    },
];

/// Looks up a preset by name; spaces, `&` and case are ignored.
pub fn food_preset(name: &str) -> Result<&'static FoodPreset> {
    let key = normalize(name);
    FOOD_PRESETS
        .iter()
        .find(|p| normalize(p.name) == key)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown food type {name:?}; expected one of {}",
                FOOD_PRESETS.map(|p| p.name).join(", ")
            ))
        })
}

fn normalize(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

pub fn class_table(food: &str) -> Result<ClassTable> {
    let p = food_preset(food)?;
    let mut names = vec!["background"];
    names.extend_from_slice(p.classes);
    ClassTable::from_names(&names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fesenjan_classes() {
        let t = class_table("Fesenjan").unwrap();
        assert_eq!(t.names(), &["background", "Fesenjan stew", "Rice"]);
    }

    #[test]
    fn lookup_is_forgiving() {
        assert_eq!(food_preset("Protein & Fries").unwrap().name, "ProteinFries");
        assert_eq!(food_preset("adas polo").unwrap().train_size, 264);
        assert!(food_preset("Pizza").is_err());
        assert_eq!(class_table("AdasPolo").unwrap().len(), 2);
    }
}
