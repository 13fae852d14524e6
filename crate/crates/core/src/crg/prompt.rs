use crate::error::{Error, Result};

/// Prompt template; `{New Category}` and `{List of Seen Categories}` are
/// replaced verbatim.
pub const TEMPLATE: &str = "\
Based on the following list of known categories, please identify all categories that have a direct relationship with the new category {New Category}. For each related category, provide the type of relationship, the association strength (High, Medium, Low), and an explanation.

Types of Relationships

1. Synonymy/Similarity: Two categories are conceptually very similar or synonymous.
2. Is-a/Hypernym: One category is a superordinate or subordinate concept of the other.
3. Functional Relationship: The function or use of one category is related to the other.
4. Co-occurrence: Two categories often appear in the same context or environment.
5. Part-Whole Relationship: One category is a component of the other.

Instructions

Please provide the information for each relevant category in the following format:

Related Category [Number]: [Category Name]
- Type of Relationship: [Relationship Type]
- Association Strength: High / Medium / Low
- Explanation: [Brief explanation of the relationship and the reason for the assigned strength]

Example

New Category: Nature

List of Seen Categories:
natural, fauna, wildlife, flora, scenic, outdoors, cliff, blossoms, insect, wild, plant, scenery, blooms, gardens, landscapes

Example Output:

Related Category 1: natural
- Type of Relationship: Synonymy/Similarity
- Association Strength: High
- Explanation: \"Natural\" is conceptually very similar to \"nature\" as both refer to elements of the physical world not created by humans.

Related Category 2: fauna
- Type of Relationship: Is-a/Hypernym
- Association Strength: High
- Explanation: \"Fauna\" represents the animal life of a region, which is a fundamental part of \"nature\".

...

Using the format and example provided above, identify all categories from the list of known categories that have a direct relationship with the new category {New Category}. For each related category, specify:

List of Seen Categories:

{List of Seen Categories}

Focus on associations that would be most relevant for understanding or classifying {New Category} within this domain.
";

pub fn render_prompt(new_class: &str, seen_classes: &[String]) -> Result<String> {
    if seen_classes.is_empty() {
        return Err(Error::Config(format!(
            "no known categories to relate {new_class:?} to"
        )));
    }
    // Substitute the list first so a class name containing the other
    // placeholder is never re-expanded.
    let list = seen_classes.join(", ");
    let parts: Vec<&str> = TEMPLATE.split("{List of Seen Categories}").collect();
    let mut out = String::with_capacity(TEMPLATE.len() + list.len());
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            out.push_str(&list);
        }
        out.push_str(&part.replace("{New Category}", new_class));
    }
    Ok(out)
}
